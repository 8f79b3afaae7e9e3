use crate::corpus::{ParallelPair, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Real;

use super::net::pair_loss;
use super::{Seq2SeqModel, Weights};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    /// `(coordinate, analytic, numeric, relative error)` above tolerance.
    pub failures: Vec<(String, f64, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        Err(Error::GradientCheck {
            failed: self.failures.len(),
            checked: self.checked,
            tolerance: self.tolerance,
            worst_param: self.worst,
            worst_error: self.max_error,
        })
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps coordinates whose true
/// gradient is zero from dividing noise by noise.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::config("epsilon", format!("{epsilon} is outside [1e-5, 1e-3]")));
    }
    Ok(())
}

/// Checks the backward pass on one small pair, in f64, at `samples`
/// coordinates. A tensor is drawn uniformly, then a coordinate in it;
/// embedding coordinates are drawn from rows the pair actually uses.
pub fn gradient_check(
    model: &Seq2SeqModel,
    pair: &ParallelPair,
    epsilon: f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    gradient_check_masked(model, pair, None, epsilon, tolerance, samples, seed)
}

/// [`gradient_check`] with prediction `i` limited to `visible[i]` source
/// states (`|y| + 1` entries).
pub fn gradient_check_masked(
    model: &Seq2SeqModel,
    pair: &ParallelPair,
    visible: Option<&[usize]>,
    epsilon: f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    if let Some(v) = visible {
        if v.len() != pair.target.len() + 1 || v.iter().any(|&j| j < 1 || j > pair.source.len()) {
            return Err(Error::Contract("visibility schedule does not fit the pair".into()));
        }
    }
    if pair.source.len() > 6 || pair.target.len() > 6 {
        return Err(Error::Contract("gradient checks need |x|, |y| <= 6".into()));
    }
    model.check_pair(&pair.source, &pair.target)?;
    let mode = model.config.encoder_mode;
    let mut w: Weights<f64> = model.weights.cast();
    let mut grad = Weights::<f64>::zeros(&model.config);
    let _ = pair_loss(&w, mode, &pair.source, &pair.target, visible, Some((&mut grad, 1.0)));

    let names = w.names();
    let d = model.config.d_model;
    let mut tgt_rows: Vec<u32> = pair.target.iter().copied().chain([BOS, EOS]).collect();
    tgt_rows.retain(|&t| t != EOS);
    let mut rng = SplitMix64::new(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_error: 0.0,
        worst: String::new(),
        failures: Vec::new(),
        tolerance,
    };
    for _ in 0..samples {
        let ti = rng.below(names.len());
        let len = w.tensors()[ti].len();
        let idx = match names[ti].as_str() {
            "src_emb" => pair.source[rng.below(pair.source.len())] as usize * d + rng.below(d),
            "tgt_emb" => tgt_rows[rng.below(tgt_rows.len())] as usize * d + rng.below(d),
            _ => rng.below(len),
        };
        let analytic = grad.tensors()[ti].data()[idx];
        let orig = w.tensors()[ti].data()[idx];
        w.tensors_mut()[ti].data_mut()[idx] = orig + epsilon;
        let plus = pair_loss(&w, mode, &pair.source, &pair.target, visible, None);
        w.tensors_mut()[ti].data_mut()[idx] = orig - epsilon;
        let minus = pair_loss(&w, mode, &pair.source, &pair.target, visible, None);
        w.tensors_mut()[ti].data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic.to_f64(), numeric);
        let label = format!("{}[{idx}]", names[ti]);
        report.checked += 1;
        if err > report.max_error || report.worst.is_empty() {
            report.max_error = err;
            report.worst = label.clone();
        }
        if err > tolerance {
            report.failures.push((label, analytic, numeric, err));
        }
    }
    report.into_result()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{EncoderMode, ModelConfig};

    fn model(mode: EncoderMode) -> Seq2SeqModel {
        let cfg = ModelConfig {
            d_model: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            encoder_mode: mode,
            source_vocab_size: 9,
            target_vocab_size: 10,
            max_len: 10,
        };
        Seq2SeqModel::new(cfg, 17).unwrap()
    }

    fn pair() -> ParallelPair {
        ParallelPair {
            source: vec![4, 6, 5, 8],
            target: vec![7, 4, 9],
            gold_alignment: None,
        }
    }

    #[test]
    fn fresh_models_pass() {
        for mode in [EncoderMode::Full, EncoderMode::Causal] {
            let r = gradient_check(&model(mode), &pair(), 1e-4, 1e-3, 300, 5).unwrap();
            assert_eq!(r.checked, 300);
            assert!(r.max_error <= 1e-3, "{mode}: {r:?}");
        }
    }

    #[test]
    fn masked_loss_passes() {
        let m = model(EncoderMode::Causal);
        let r = gradient_check_masked(&m, &pair(), Some(&[1, 2, 2, 4]), 1e-4, 1e-3, 300, 9).unwrap();
        assert!(r.max_error <= 1e-3, "{r:?}");
        assert!(gradient_check_masked(&m, &pair(), Some(&[1, 2]), 1e-4, 1e-3, 10, 9).is_err());
    }

    #[test]
    fn pad_embedding_gets_no_gradient() {
        let m = model(EncoderMode::Full);
        let w: Weights<f64> = m.weights.cast();
        let mut g = Weights::<f64>::zeros(&m.config);
        let p = pair();
        pair_loss(&w, EncoderMode::Full, &p.source, &p.target, None, Some((&mut g, 1.0)));
        assert!(g.src_emb.row(0).iter().all(|x| x.abs() < 1e-6));
        assert!(g.tgt_emb.row(0).iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn epsilon_out_of_range() {
        assert!(matches!(
            gradient_check(&model(EncoderMode::Full), &pair(), 1.0, 1e-3, 10, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn broken_gradient_is_caught() {
        let r = GradCheckReport {
            checked: 1,
            max_error: 0.5,
            worst: "x[0]".into(),
            failures: vec![("x[0]".into(), 1.0, 0.5, 0.5)],
            tolerance: 1e-3,
        };
        assert!(matches!(r.into_result(), Err(Error::GradientCheck { failed: 1, .. })));
    }
}
