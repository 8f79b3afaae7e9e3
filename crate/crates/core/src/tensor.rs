//! Dense float arrays and the handful of kernels the models need.
//!
//! Kernels are written so the inner loops auto-vectorize while keeping a
//! fixed summation order: `dot` uses eight interleaved accumulators that are
//! combined in a fixed tree, `axpy` touches each output lane independently.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type the model code is generic over. Production runs use `f32`;
/// gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major array of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            (1..=3).contains(&shape.len()),
            "tensor rank must be 1..=3, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if !(1..=3).contains(&shape.len()) {
            return Err(Error::Contract(format!(
                "tensor rank must be 1..=3, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Dot product with a fixed eight-lane summation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += x · W` for `W` stored row-major as `[x.len(), y.len()]`.
#[inline]
pub fn vecmat_acc<T: Real>(y: &mut [T], x: &[T], w: &[T]) {
    let out = y.len();
    debug_assert_eq!(w.len(), x.len() * out);
    for (&xi, wrow) in x.iter().zip(w.chunks_exact(out)) {
        if xi != T::zero() {
            axpy(y, xi, wrow);
        }
    }
}

/// `dx += W · dy` for `W` stored row-major as `[dx.len(), dy.len()]`.
#[inline]
pub fn matvec_acc<T: Real>(dx: &mut [T], w: &[T], dy: &[T]) {
    let out = dy.len();
    debug_assert_eq!(w.len(), dx.len() * out);
    for (dxi, wrow) in dx.iter_mut().zip(w.chunks_exact(out)) {
        *dxi += dot(wrow, dy);
    }
}

/// `dW += x ⊗ dy` for `dW` stored row-major as `[x.len(), dy.len()]`.
#[inline]
pub fn outer_acc<T: Real>(dw: &mut [T], x: &[T], dy: &[T]) {
    let out = dy.len();
    debug_assert_eq!(dw.len(), x.len() * out);
    for (&xi, drow) in x.iter().zip(dw.chunks_exact_mut(out)) {
        if xi != T::zero() {
            axpy(drow, xi, dy);
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place softmax.
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Log-softmax over the entries whose `mask` bit is set; masked-out entries
/// become `-inf`. At least one entry must be allowed.
pub fn log_softmax_masked<T: Real>(logits: &[T], allowed: impl Fn(usize) -> bool) -> Vec<T> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| allowed(*k))
        .map(|(_, &x)| x)
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (k, &x) in logits.iter().enumerate() {
        if allowed(k) {
            sum += (x - max).exp();
        }
    }
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(k, &x)| if allowed(k) { x - lse } else { T::neg_infinity() })
        .collect()
}

/// Index of the largest value; ties go to the smallest index. NaNs are skipped.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (k, &x) in v.iter().enumerate() {
        if x > best_v {
            best = k;
            best_v = x;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn vecmat_and_matvec_are_transposes() {
        // W is 2x3
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = [0.0; 3];
        vecmat_acc(&mut y, &[1.0, -1.0], &w);
        assert_eq!(y, [-3.0, -3.0, -3.0]);
        let mut dx = [0.0; 2];
        matvec_acc(&mut dx, &w, &[1.0, 0.0, 1.0]);
        assert_eq!(dx, [4.0, 10.0]);
    }

    #[test]
    fn softmax_of_single_entry_is_one() {
        let mut v = [3.7f32];
        softmax_in_place(&mut v);
        assert_eq!(v, [1.0]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(1e4f32), 1.0);
        assert_eq!(sigmoid(-1e4f32), 0.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn masked_log_softmax_excludes_entries() {
        let lp = log_softmax_masked(&[0.0f64, 0.0, 0.0], |k| k != 1);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn rank_is_checked() {
        assert!(Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
