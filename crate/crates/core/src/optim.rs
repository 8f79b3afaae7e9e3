//! Adam with warmup and inverse square-root decay.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update of `params` with `grads` (same order and shapes).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor], lr: f32) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *x -= lr * update;
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then `peak * sqrt(warmup / t)`.
pub fn inverse_sqrt_lr(peak: f32, warmup: u32, t: u32) -> f32 {
    let t = t.max(1) as f32;
    let w = warmup.max(1) as f32;
    peak * (t / w).min((w / t).sqrt())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert_eq!(inverse_sqrt_lr(1.0, 100, 100), 1.0);
        assert!((inverse_sqrt_lr(1.0, 100, 50) - 0.5).abs() < 1e-6);
        assert!((inverse_sqrt_lr(1.0, 100, 400) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let mut opt = Adam::new(0.9, 0.999);
        opt.step(vec![&mut p], &[&g], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-5);
        assert!((p.data()[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let before = p.clone();
        let g = Tensor::from_vec(&[3], vec![1.0, 0.0, -3.0]).unwrap();
        let mut opt = Adam::new(0.9, 0.98);
        opt.step(vec![&mut p], &[&g], 0.0);
        assert_eq!(p, before);
    }
}
