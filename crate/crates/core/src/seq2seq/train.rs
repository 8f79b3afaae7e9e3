use std::time::Instant;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, inverse_sqrt_lr, Adam};
use crate::rng::SplitMix64;

use super::net::pair_loss;
use super::{Seq2SeqModel, Weights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub warmup_steps: u32,
    /// Target tokens (EOS included) per optimizer step.
    pub batch_tokens: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f32,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            warmup_steps: 200,
            batch_tokens: 400,
            epochs: 30,
            seed: 1,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy (nats per target token) of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u32,
    pub seconds: f64,
}

/// Per-pair read offsets `j_1..j_|y|` used to hide future source states
/// while training a model meant for streaming. Each epoch, a pair is
/// trained under its offsets with probability `rate` and with the whole
/// source visible otherwise. Prediction `i` then sees
/// `max(v_{i-1}, j_i + s_i)` states, `s_i` uniform in `0..=slack`; the EOS
/// prediction always sees everything.
#[derive(Debug, Clone, Copy)]
pub struct StreamingMasks<'a> {
    pub offsets: &'a [Vec<usize>],
    pub rate: f64,
    pub slack: usize,
}

fn mask_schedule(offsets: &[usize], n: usize, slack: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut v = 1;
    offsets
        .iter()
        .map(|&j| {
            v = v.max((j + rng.below(slack + 1)).min(n));
            v
        })
        .chain([n])
        .collect()
}

pub fn train(model: &mut Seq2SeqModel, corpus: &Corpus, hyper: &TrainHyper) -> Result<TrainReport> {
    train_with(model, corpus, hyper, None, |_, _, _| {})
}

/// Teacher-forced training; `on_epoch(epoch, mean_loss, model)` runs after each epoch.
pub fn train_with(
    model: &mut Seq2SeqModel,
    corpus: &Corpus,
    hyper: &TrainHyper,
    masks: Option<StreamingMasks<'_>>,
    mut on_epoch: impl FnMut(usize, f64, &Seq2SeqModel),
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot train on an empty corpus".into()));
    }
    if !(hyper.lr >= 0.0) {
        return Err(Error::config("lr", "must be non-negative"));
    }
    if hyper.batch_tokens == 0 {
        return Err(Error::config("batch_tokens", "must be positive"));
    }
    if hyper.epochs == 0 {
        return Err(Error::config("epochs", "must be positive"));
    }
    for p in &corpus.pairs {
        model.check_pair(&p.source, &p.target)?;
        if p.target.is_empty() {
            return Err(Error::Data("pair with empty target".into()));
        }
    }

    if let Some(m) = &masks {
        if !(0.0..=1.0).contains(&m.rate) {
            return Err(Error::config("mask_rate", "must be in [0, 1]"));
        }
        if m.offsets.len() != corpus.len() {
            return Err(Error::Data(format!(
                "{} mask schedules for {} pairs",
                m.offsets.len(),
                corpus.len()
            )));
        }
        for (k, (o, p)) in m.offsets.iter().zip(&corpus.pairs).enumerate() {
            if o.len() != p.target.len() || o.iter().any(|&j| j < 1 || j > p.source.len()) {
                return Err(Error::Data(format!("mask schedule of pair {} does not fit the pair", k + 1)));
            }
        }
    }

    let start = Instant::now();
    let mode = model.config.encoder_mode;
    let mut rng = SplitMix64::new(hyper.seed);
    let mut opt = Adam::new(hyper.beta1, hyper.beta2);
    let mut grad = Weights::<f32>::zeros(&model.config);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        rng.shuffle(&mut order);
        let mut total_loss = 0.0f64;
        let mut total_tokens = 0usize;
        let mut k = 0;
        while k < order.len() {
            let mut batch = Vec::new();
            let mut tokens = 0;
            while k < order.len() && tokens < hyper.batch_tokens {
                let idx = order[k];
                let p = &corpus.pairs[idx];
                tokens += p.target.len() + 1;
                let visible = match masks {
                    Some(m) if rng.bernoulli(m.rate) => Some(mask_schedule(&m.offsets[idx], p.source.len(), m.slack, &mut rng)),
                    _ => None,
                };
                batch.push((p, visible));
                k += 1;
            }
            grad.zero_();
            let scale = 1.0 / tokens as f32;
            let mut batch_loss = 0.0f64;
            for (p, visible) in batch {
                batch_loss += pair_loss(
                    &model.weights,
                    mode,
                    &p.source,
                    &p.target,
                    visible.as_deref(),
                    Some((&mut grad, scale)),
                ) as f64;
            }
            let step = opt.steps() as usize + 1;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { step, loss: batch_loss });
            }
            let mut grads = grad.tensors_mut();
            let norm = clip_global_norm(&mut grads, hyper.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence { step, loss: batch_loss });
            }
            let grads: Vec<_> = grad.tensors();
            let lr = inverse_sqrt_lr(hyper.lr, hyper.warmup_steps, opt.steps() + 1);
            opt.step(model.weights.tensors_mut(), &grads, lr);
            total_loss += batch_loss;
            total_tokens += tokens;
        }
        let mean = total_loss / total_tokens as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                step: opt.steps() as usize,
                loss: mean,
            });
        }
        epoch_loss.push(mean);
        on_epoch(epoch, mean, model);
    }
    Ok(TrainReport {
        epoch_loss,
        steps: opt.steps(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
