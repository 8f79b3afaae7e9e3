//! The read/write classifier.
//!
//! `e = (U s_i) . (V h_j) / sqrt(d_p) + b`, `p_write = sigmoid(e)`, where
//! `s_i` is the last-layer decoder state that would produce target token
//! `i` and `h_j` the newest encoder state. Trained with class-weighted
//! binary cross-entropy on pseudo-labels while the translation model stays
//! frozen.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Corpus, BOS};
use crate::error::{Error, Result};
use crate::labels::{read_offsets, PolicyLabelMatrix};
use crate::optim::Adam;
use crate::rng::SplitMix64;
use crate::seq2seq::{EncoderMode, EncoderStates, Seq2SeqModel};
use crate::tensor::{dot, outer_acc, sigmoid, vecmat_acc, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Read,
    Write,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Action::Read => "READ",
            Action::Write => "WRITE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub p_write: f32,
    pub action: Action,
    pub delta: f32,
}

impl Decision {
    /// WRITE iff `p_write >= delta`.
    pub fn threshold(p_write: f32, delta: f32) -> Self {
        Decision {
            p_write,
            action: if p_write >= delta { Action::Write } else { Action::Read },
            delta,
        }
    }
}

pub(crate) fn check_delta(delta: f32) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("delta", format!("{delta} is outside (0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// `[d_model, d_p]`, applied to the decoder state.
    pub u: Tensor,
    /// `[d_model, d_p]`, applied to the encoder state.
    pub v: Tensor,
    pub b: f32,
}

/// Bias at initialization; negative so an untrained policy prefers READ.
pub const INIT_BIAS: f32 = -2.0;

impl PolicyParams {
    pub fn new(d_model: usize, d_p: usize, seed: u64) -> Result<Self> {
        if d_p < 4 {
            return Err(Error::config("d_p", "must be at least 4"));
        }
        let mut rng = SplitMix64::new(seed);
        let limit = (6.0 / (d_model + d_p) as f32).sqrt();
        let mut u = Tensor::zeros(&[d_model, d_p]);
        let mut v = Tensor::zeros(&[d_model, d_p]);
        for x in u.data_mut().iter_mut().chain(v.data_mut()) {
            *x = rng.symmetric_f32(limit);
        }
        Ok(PolicyParams { u, v, b: INIT_BIAS })
    }

    pub fn d_model(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn d_p(&self) -> usize {
        self.u.shape()[1]
    }

    fn check(&self, s: &[f32], h: &[f32]) -> Result<()> {
        let d = self.d_model();
        if s.len() != d || h.len() != d {
            return Err(Error::Contract(format!(
                "state widths {} and {} do not match policy width {d}",
                s.len(),
                h.len()
            )));
        }
        Ok(())
    }

    pub fn energy(&self, s: &[f32], h: &[f32]) -> Result<f32> {
        self.check(s, h)?;
        Ok(energy_parts(self.u.data(), self.v.data(), self.b, self.d_p(), s, h).0)
    }

    pub fn write_probability(&self, s: &[f32], h: &[f32]) -> Result<f32> {
        Ok(sigmoid(self.energy(s, h)?))
    }

    pub fn decide(&self, s: &[f32], h: &[f32], delta: f32) -> Result<Decision> {
        check_delta(delta)?;
        Ok(Decision::threshold(self.write_probability(s, h)?, delta))
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.b.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let b = Tensor::from_vec(&[1], vec![self.b])?;
        let meta = serde_json::json!({ "d_model": self.d_model(), "d_p": self.d_p() });
        checkpoint::write(path, "policy", meta, &[("u".into(), &self.u), ("v".into(), &self.v), ("b".into(), &b)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.kind != "policy" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("checkpoint kind is {:?}, expected \"policy\"", c.kind),
            });
        }
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut it = c.tensors.into_iter();
        let (Some((un, u)), Some((vn, v)), Some((bn, b)), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(corrupt("policy checkpoint must hold exactly u, v, b"));
        };
        if un != "u" || vn != "v" || bn != "b" || u.shape() != v.shape() || u.shape().len() != 2 || b.len() != 1 {
            return Err(corrupt("policy tensors have unexpected names or shapes"));
        }
        Ok(PolicyParams { u, v, b: b.data()[0] })
    }
}

/// Returns `(energy, U s, V h)`.
fn energy_parts<T: Real>(u: &[T], v: &[T], b: T, d_p: usize, s: &[T], h: &[T]) -> (T, Vec<T>, Vec<T>) {
    let mut us = vec![T::zero(); d_p];
    vecmat_acc(&mut us, s, u);
    let mut vh = vec![T::zero(); d_p];
    vecmat_acc(&mut vh, h, v);
    let e = dot(&us, &vh) / T::from_f64(d_p as f64).sqrt() + b;
    (e, us, vh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyExample {
    pub decoder_state: Vec<f32>,
    pub encoder_state: Vec<f32>,
    pub label: u8,
    pub pair: usize,
    /// 1-based target index.
    pub i: usize,
    /// 1-based count of source tokens read.
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrainingSet {
    pub examples: Vec<PolicyExample>,
    /// `#negatives / #positives`, 1.0 when undefined.
    pub positive_weight: f32,
}

impl PolicyTrainingSet {
    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }
}

/// Teacher-forced decoder states indexed by `(i, j)`: the last-layer state
/// after feeding `y_{<i}` with the first `j` source states visible at every
/// step. Depends only on `(i, j)`, not on how the walk got there.
pub struct TeacherForcedStates<'a> {
    model: &'a Seq2SeqModel,
    enc: EncoderStates,
    target: &'a [u32],
    columns: HashMap<usize, Vec<Vec<f32>>>,
}

impl<'a> TeacherForcedStates<'a> {
    pub fn new(model: &'a Seq2SeqModel, source: &[u32], target: &'a [u32]) -> Result<Self> {
        let enc = model.encode(source, EncoderMode::Causal)?;
        Ok(TeacherForcedStates {
            model,
            enc,
            target,
            columns: HashMap::new(),
        })
    }

    pub fn encoder(&self) -> &EncoderStates {
        &self.enc
    }

    /// `s_i` at visibility `j`, both 1-based.
    pub fn state(&mut self, i: usize, j: usize) -> Result<&[f32]> {
        if i < 1 || i > self.target.len() {
            return Err(Error::Contract(format!("target index {i} outside 1..={}", self.target.len())));
        }
        if !self.columns.contains_key(&j) {
            let mut col = Vec::with_capacity(self.target.len());
            let mut state = self.model.initial_state();
            let mut prev = BOS;
            for &y in self.target {
                let step = self.model.decode_step(prev, &state, &self.enc, j)?;
                col.push(step.state.top().to_vec());
                state = step.state;
                prev = y;
            }
            self.columns.insert(j, col);
        }
        Ok(&self.columns[&j][i - 1])
    }
}

/// Collects classifier examples along each pair's label staircase: for
/// target `i`, every `j` from `j_{i-1}` (with `j_0 = 1`) to `j_i`. With
/// `full_grid`, every cell of the label matrix is used instead.
pub fn build_training_set(
    model: &Seq2SeqModel,
    corpus: &Corpus,
    labels: &[PolicyLabelMatrix],
    full_grid: bool,
) -> Result<PolicyTrainingSet> {
    if labels.len() < corpus.len() {
        return Err(Error::Data(format!(
            "no labels for pair {} ({} label matrices for {} pairs)",
            labels.len() + 1,
            labels.len(),
            corpus.len()
        )));
    }
    let mut examples = Vec::new();
    for (k, (pair, l)) in corpus.pairs.iter().zip(labels).enumerate() {
        if l.target_len() != pair.target.len() || l.source_len() != pair.source.len() {
            return Err(Error::Data(format!(
                "labels for pair {} are {}x{}, pair is {}x{}",
                k + 1,
                l.target_len(),
                l.source_len(),
                pair.target.len(),
                pair.source.len()
            )));
        }
        let offsets = read_offsets(l)?;
        let mut tf = TeacherForcedStates::new(model, &pair.source, &pair.target)?;
        let mut from = 1;
        for (idx, &to) in offsets.as_slice().iter().enumerate() {
            let i = idx + 1;
            let cells = if full_grid { 1..=pair.source.len() } else { from..=to };
            for j in cells {
                let s = tf.state(i, j)?.to_vec();
                examples.push(PolicyExample {
                    decoder_state: s,
                    encoder_state: tf.encoder().row(j - 1).to_vec(),
                    label: l.get(i - 1, j - 1),
                    pair: k,
                    i,
                    j,
                });
            }
            from = to;
        }
    }
    let pos = examples.iter().filter(|e| e.label == 1).count();
    let neg = examples.len() - pos;
    let positive_weight = if pos == 0 || neg == 0 { 1.0 } else { neg as f32 / pos as f32 };
    Ok(PolicyTrainingSet {
        examples,
        positive_weight,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyHyper {
    pub lr: f32,
    pub epochs: usize,
    pub seed: u64,
    pub d_p: usize,
    pub batch_size: usize,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper {
            lr: 3e-3,
            epochs: 30,
            seed: 1,
            d_p: 32,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    pub epoch_loss: Vec<f64>,
    /// Training-set metrics at threshold 0.5.
    pub train: ClassifierMetrics,
    /// Worst relative error of the classifier gradient check at init.
    pub gradcheck_max_error: f64,
}

/// Weighted BCE summed over `batch`; adds `scale * grad` into `(gu, gv, gb)`.
#[allow(clippy::too_many_arguments)]
fn batch_loss<T: Real>(
    u: &[T],
    v: &[T],
    b: T,
    d_p: usize,
    batch: &[(&[T], &[T], u8)],
    positive_weight: T,
    mut grad: Option<(&mut [T], &mut [T], &mut T, T)>,
) -> T {
    let mut loss = T::zero();
    let norm = T::one() / T::from_f64(d_p as f64).sqrt();
    for &(s, h, label) in batch {
        let (e, us, vh) = energy_parts(u, v, b, d_p, s, h);
        let w = if label == 1 { positive_weight } else { T::one() };
        // -log p = softplus(-e), -log(1 - p) = softplus(e)
        let softplus = |x: T| x.max(T::zero()) + (-x.abs()).exp().ln_1p();
        loss += w * if label == 1 { softplus(-e) } else { softplus(e) };
        if let Some((gu, gv, gb, scale)) = grad.as_mut() {
            let de = w * (sigmoid(e) - T::from_f64(label as f64)) * *scale;
            **gb += de;
            let a: Vec<T> = vh.iter().map(|&x| x * de * norm).collect();
            outer_acc(gu, s, &a);
            let c: Vec<T> = us.iter().map(|&x| x * de * norm).collect();
            outer_acc(gv, h, &c);
        }
    }
    loss
}

/// Central-difference check of the classifier gradient in f64 on up to 32
/// examples; returns the worst relative error over `samples` coordinates.
pub fn policy_gradient_check(
    params: &PolicyParams,
    set: &PolicyTrainingSet,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    crate::seq2seq::check_epsilon(epsilon)?;
    let d_p = params.d_p();
    let s64: Vec<(Vec<f64>, Vec<f64>, u8)> = set
        .examples
        .iter()
        .take(32)
        .map(|e| {
            (
                e.decoder_state.iter().map(|&x| x as f64).collect(),
                e.encoder_state.iter().map(|&x| x as f64).collect(),
                e.label,
            )
        })
        .collect();
    let batch: Vec<(&[f64], &[f64], u8)> = s64.iter().map(|(s, h, l)| (s.as_slice(), h.as_slice(), *l)).collect();
    let pw = set.positive_weight as f64;
    // u, v and b flattened into one vector so one coordinate can be nudged
    let nu = params.u.len();
    let mut flat: Vec<f64> = params
        .u
        .data()
        .iter()
        .chain(params.v.data())
        .map(|&x| x as f64)
        .chain(std::iter::once(params.b as f64))
        .collect();
    let loss_at = |flat: &[f64], grad: Option<(&mut [f64], &mut [f64], &mut f64, f64)>| {
        let (u, rest) = flat.split_at(nu);
        let (v, b) = rest.split_at(nu);
        batch_loss(u, v, b[0], d_p, &batch, pw, grad)
    };
    let mut g = vec![0.0; flat.len()];
    {
        let (gu, rest) = g.split_at_mut(nu);
        let (gv, gb) = rest.split_at_mut(nu);
        loss_at(&flat, Some((gu, gv, &mut gb[0], 1.0)));
    }

    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let k = match rng.below(3) {
            0 => rng.below(nu),
            1 => nu + rng.below(nu),
            _ => 2 * nu,
        };
        let orig = flat[k];
        flat[k] = orig + epsilon;
        let plus = loss_at(&flat, None);
        flat[k] = orig - epsilon;
        let minus = loss_at(&flat, None);
        flat[k] = orig;
        worst = worst.max(crate::seq2seq::relative_error(g[k], (plus - minus) / (2.0 * epsilon)));
    }
    Ok(worst)
}

pub fn evaluate(params: &PolicyParams, set: &PolicyTrainingSet, delta: f32) -> Result<ClassifierMetrics> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for e in &set.examples {
        let p = params.write_probability(&e.decoder_state, &e.encoder_state)?;
        match (p >= delta, e.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = set.examples.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClassifierMetrics {
        accuracy: ratio(tp + tn, n),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        examples: n,
    })
}

pub fn train_policy(set: &PolicyTrainingSet, hyper: &PolicyHyper) -> Result<(PolicyParams, PolicyReport)> {
    train_policy_with(set, hyper, |_, _| {})
}

/// Minibatch Adam on class-weighted binary cross-entropy.
pub fn train_policy_with(
    set: &PolicyTrainingSet,
    hyper: &PolicyHyper,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(PolicyParams, PolicyReport)> {
    let Some(first) = set.examples.first() else {
        return Err(Error::Data("policy training set is empty".into()));
    };
    if !(hyper.lr >= 0.0) {
        return Err(Error::config("lr", "must be non-negative"));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(Error::config("batch_size", "batch size and epochs must be positive"));
    }
    let d = first.decoder_state.len();
    let mut rng = SplitMix64::new(hyper.seed);
    let mut params = PolicyParams::new(d, hyper.d_p, rng.next_u64())?;
    let gradcheck_max_error = policy_gradient_check(&params, set, 1e-4, 200, rng.next_u64())?;
    if gradcheck_max_error > 1e-3 {
        return Err(Error::GradientCheck {
            failed: 1,
            checked: 200,
            tolerance: 1e-3,
            worst_param: "policy".into(),
            worst_error: gradcheck_max_error,
        });
    }

    let d_p = hyper.d_p;
    let mut opt = Adam::new(0.9, 0.999);
    let mut order: Vec<usize> = (0..set.examples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);
    let total_weight: f64 = set
        .examples
        .iter()
        .map(|e| if e.label == 1 { set.positive_weight as f64 } else { 1.0 })
        .sum();
    for epoch in 1..=hyper.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0f64;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(&[f32], &[f32], u8)> = chunk
                .iter()
                .map(|&k| {
                    let e = &set.examples[k];
                    (e.decoder_state.as_slice(), e.encoder_state.as_slice(), e.label)
                })
                .collect();
            let weight: f32 = batch
                .iter()
                .map(|b| if b.2 == 1 { set.positive_weight } else { 1.0 })
                .sum();
            let mut gu = Tensor::zeros(params.u.shape());
            let mut gv = Tensor::zeros(params.v.shape());
            let mut gb = Tensor::zeros(&[1]);
            let mut gbs = 0.0f32;
            let loss = batch_loss(
                params.u.data(),
                params.v.data(),
                params.b,
                d_p,
                &batch,
                set.positive_weight,
                Some((gu.data_mut(), gv.data_mut(), &mut gbs, 1.0 / weight)),
            );
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: opt.steps() as usize + 1,
                    loss: loss as f64,
                });
            }
            sum += loss as f64;
            gb.data_mut()[0] = gbs;
            let mut bt = Tensor::from_vec(&[1], vec![params.b])?;
            opt.step(vec![&mut params.u, &mut params.v, &mut bt], &[&gu, &gv, &gb], hyper.lr);
            params.b = bt.data()[0];
        }
        let mean = sum / total_weight;
        epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            step: opt.steps() as usize,
            loss: f64::NAN,
        });
    }
    let train = evaluate(&params, set, 0.5)?;
    Ok((
        params,
        PolicyReport {
            epoch_loss,
            train,
            gradcheck_max_error,
        },
    ))
}

/// Replays the greedy read/write walk with the reference target forced:
/// at `(i, j)` the policy sees the teacher-forced state of [`TeacherForcedStates`];
/// READ moves to `j + 1`, WRITE fixes `j_i = j`, and `j = |x|` always writes.
pub fn teacher_forced_walk(
    model: &Seq2SeqModel,
    params: &PolicyParams,
    source: &[u32],
    target: &[u32],
    delta: f32,
) -> Result<Vec<usize>> {
    check_delta(delta)?;
    let mut tf = TeacherForcedStates::new(model, source, target)?;
    let n = source.len();
    let mut j = 1;
    let mut offsets = Vec::with_capacity(target.len());
    for i in 1..=target.len() {
        while j < n {
            let h = tf.encoder().row(j - 1).to_vec();
            let s = tf.state(i, j)?;
            if params.decide(s, &h, delta)?.action == Action::Write {
                break;
            }
            j += 1;
        }
        offsets.push(j);
    }
    Ok(offsets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(s: Vec<f32>, h: Vec<f32>, label: u8) -> PolicyExample {
        PolicyExample {
            decoder_state: s,
            encoder_state: h,
            label,
            pair: 0,
            i: 1,
            j: 1,
        }
    }

    #[test]
    fn degenerate_projections_give_bias() {
        let mut p = PolicyParams::new(8, 4, 1).unwrap();
        p.u.fill(0.0);
        p.v.fill(0.0);
        p.b = 0.7;
        assert_eq!(p.energy(&[1.0; 8], &[3.0; 8]).unwrap(), 0.7);
        assert_eq!(p.write_probability(&[0.0; 8], &[0.0; 8]).unwrap(), sigmoid(0.7));
    }

    #[test]
    fn energy_is_linear_in_decoder_state() {
        let p = PolicyParams::new(8, 4, 2).unwrap();
        let s: Vec<f32> = (0..8).map(|k| k as f32 * 0.1 - 0.3).collect();
        let h: Vec<f32> = (0..8).map(|k| (k as f32).cos()).collect();
        let s3: Vec<f32> = s.iter().map(|x| x * 3.0).collect();
        let e1 = p.energy(&s, &h).unwrap() - p.b;
        let e3 = p.energy(&s3, &h).unwrap() - p.b;
        assert!((e3 - 3.0 * e1).abs() < 1e-5);
    }

    #[test]
    fn fresh_policy_prefers_read() {
        let p = PolicyParams::new(64, 32, 9).unwrap();
        let mut rng = SplitMix64::new(4);
        let mut probs: Vec<f32> = (0..501)
            .map(|_| {
                let mut unit = || {
                    let v: Vec<f32> = (0..64).map(|_| rng.symmetric_f32(1.0)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                    v.into_iter().map(|x| x / n).collect::<Vec<_>>()
                };
                let (s, h) = (unit(), unit());
                p.write_probability(&s, &h).unwrap()
            })
            .collect();
        probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(probs[250] < 0.5);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let p = PolicyParams::new(8, 4, 1).unwrap();
        assert!(p.energy(&[0.0; 7], &[0.0; 8]).is_err());
    }

    #[test]
    fn sigmoid_properties() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(1e4f32), 1.0);
        for e in [-3.0f32, -0.5, 0.1, 2.0, 8.0] {
            assert!((sigmoid(e) + sigmoid(-e) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decision_threshold_rules() {
        assert_eq!(Decision::threshold(0.7, 0.5).action, Action::Write);
        assert_eq!(Decision::threshold(0.7, 0.9).action, Action::Read);
        assert_eq!(Decision::threshold(0.6, 0.6).action, Action::Write);
        let p = PolicyParams::new(8, 4, 1).unwrap();
        assert!(p.decide(&[0.0; 8], &[0.0; 8], 1.0).is_err());
        assert!(p.decide(&[0.0; 8], &[0.0; 8], 0.0).is_err());
    }

    #[test]
    fn separable_set_is_learned() {
        let d = 8;
        let mut examples = Vec::new();
        for k in 0..40 {
            let s = vec![1.0; d];
            let label = (k % 2) as u8;
            let h = vec![if label == 1 { 1.0 } else { -1.0 }; d];
            examples.push(ex(s, h, label));
        }
        let set = PolicyTrainingSet {
            examples,
            positive_weight: 1.0,
        };
        let hyper = PolicyHyper {
            lr: 0.05,
            epochs: 50,
            seed: 3,
            d_p: 4,
            batch_size: 8,
        };
        let (_, report) = train_policy(&set, &hyper).unwrap();
        assert_eq!(report.train.accuracy, 1.0);
        assert!(report.gradcheck_max_error <= 1e-3);
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let set = PolicyTrainingSet {
            examples: vec![ex(vec![0.5; 8], vec![0.1; 8], 1), ex(vec![0.2; 8], vec![-0.3; 8], 0)],
            positive_weight: 1.0,
        };
        let hyper = PolicyHyper {
            lr: 0.0,
            epochs: 3,
            seed: 5,
            d_p: 4,
            batch_size: 1,
        };
        let (a, _) = train_policy(&set, &hyper).unwrap();
        let mut rng = SplitMix64::new(5);
        let fresh = PolicyParams::new(8, 4, rng.next_u64()).unwrap();
        assert_eq!(a, fresh);
    }

    #[test]
    fn conflicting_labels_do_not_crash() {
        let examples = (0..20).map(|k| ex(vec![0.3; 8], vec![0.2; 8], (k % 2) as u8)).collect();
        let set = PolicyTrainingSet {
            examples,
            positive_weight: 1.0,
        };
        let (_, r) = train_policy(&set, &PolicyHyper { epochs: 5, d_p: 4, ..Default::default() }).unwrap();
        assert!(r.train.accuracy <= 0.5);
    }

    #[test]
    fn empty_set_is_an_error() {
        let set = PolicyTrainingSet {
            examples: vec![],
            positive_weight: 1.0,
        };
        assert!(train_policy(&set, &PolicyHyper::default()).is_err());
    }

    #[test]
    fn policy_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.absm");
        let p = PolicyParams::new(8, 4, 3).unwrap();
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);
    }
}
