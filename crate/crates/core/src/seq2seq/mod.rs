//! Desk-scale encoder-decoder translation model with soft cross-attention.
//!
//! The encoder is a stack of GRU layers with residual outputs (forward-only
//! in causal mode, forward + backward in full mode). Each decoder layer
//! attends over the encoder states with a scaled dot-product energy between
//! its previous state and the keys, feeds `[input ; context]` into its GRU,
//! and the output layer reads `[s_i ; c_i]` of the last layer.

mod attention;
mod gradcheck;
pub(crate) mod net;
mod train;
mod weights;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use attention::{read_attention_dump, write_attention_dump, AttentionMatrix};
pub(crate) use attention::ByteReader;
pub use gradcheck::{gradient_check, gradient_check_masked, GradCheckReport};
pub(crate) use gradcheck::{check_epsilon, relative_error};
pub use net::DecoderState;
pub use train::{train, train_with, StreamingMasks, TrainHyper, TrainReport};
pub use weights::{EncoderMode, ModelConfig, Weights};

use crate::checkpoint;
use crate::corpus::{ParallelPair, Vocab, BOS};
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitMix64};
use net::{decoder_step, encode_rows, CausalCarry, Memory};

/// Trained (or freshly initialized) translation model.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub weights: Weights<f32>,
    /// Vocabularies travel with checkpoints so later stages can map text.
    pub vocabs: Option<(Vocab, Vocab)>,
}

/// Encoder output for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub mode: EncoderMode,
    pub(crate) memory: Memory<f32>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    /// `h_j` for 0-based `j`.
    pub fn row(&self, j: usize) -> &[f32] {
        self.memory.row(j)
    }
}

/// Result of one decoder step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: DecoderState,
    /// Last-layer attention over the visible source positions.
    pub attention: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Incremental causal encoder: rows are bit-identical to batch encoding.
#[derive(Debug, Clone)]
pub struct CausalEncoder {
    carry: CausalCarry<f32>,
    states: EncoderStates,
}

impl CausalEncoder {
    pub fn new(model: &Seq2SeqModel) -> Self {
        let cfg = &model.config;
        CausalEncoder {
            carry: CausalCarry::new(cfg.n_enc_layers, cfg.d_model),
            states: EncoderStates {
                mode: EncoderMode::Causal,
                memory: Memory::new(cfg.d_model, cfg.n_dec_layers),
            },
        }
    }

    pub fn push(&mut self, model: &Seq2SeqModel, token: u32) -> Result<()> {
        model.check_token(token, model.config.source_vocab_size, "source")?;
        if self.states.len() >= model.config.max_len {
            return Err(Error::Length {
                len: self.states.len() + 1,
                max: model.config.max_len,
            });
        }
        let row = self.carry.push(&model.weights, token);
        self.states.memory.push_row(&model.weights, &row);
        Ok(())
    }

    pub fn states(&self) -> &EncoderStates {
        &self.states
    }
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        Ok(Seq2SeqModel {
            weights: Weights::init(&config, &mut rng),
            config,
            vocabs: None,
        })
    }

    pub fn with_vocabs(mut self, source: Vocab, target: Vocab) -> Self {
        self.vocabs = Some((source, target));
        self
    }

    fn check_token(&self, token: u32, vocab: usize, side: &str) -> Result<()> {
        if (token as usize) < vocab {
            Ok(())
        } else {
            Err(Error::Contract(format!("{side} token id {token} outside vocabulary of {vocab}")))
        }
    }

    pub(crate) fn check_pair(&self, source: &[u32], target: &[u32]) -> Result<()> {
        let max = self.config.max_len;
        if source.is_empty() {
            return Err(Error::Contract("empty source sentence".into()));
        }
        if source.len() > max {
            return Err(Error::Length { len: source.len(), max });
        }
        if target.len() + 2 > max {
            return Err(Error::Length {
                len: target.len() + 2,
                max,
            });
        }
        for &t in source {
            self.check_token(t, self.config.source_vocab_size, "source")?;
        }
        for &t in target {
            self.check_token(t, self.config.target_vocab_size, "target")?;
        }
        Ok(())
    }

    /// Encodes a whole source sentence. Asking for `Full` on a causal model
    /// is a contract error; `Causal` on a full model uses the forward cells.
    pub fn encode(&self, source: &[u32], mode: EncoderMode) -> Result<EncoderStates> {
        if source.is_empty() {
            return Err(Error::Contract("empty source sentence".into()));
        }
        if source.len() > self.config.max_len {
            return Err(Error::Length {
                len: source.len(),
                max: self.config.max_len,
            });
        }
        if mode == EncoderMode::Full && self.config.encoder_mode == EncoderMode::Causal {
            return Err(Error::Contract("a causal model has no backward encoder cells".into()));
        }
        for &t in source {
            self.check_token(t, self.config.source_vocab_size, "source")?;
        }
        let (rows, _) = encode_rows(&self.weights, mode, source, false);
        let mut memory = Memory::new(self.config.d_model, self.config.n_dec_layers);
        for r in &rows {
            memory.push_row(&self.weights, r);
        }
        Ok(EncoderStates { mode, memory })
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState::initial(&self.weights)
    }

    /// One decoder step over the first `visible_len` encoder states. States
    /// beyond `visible_len` take no part in the computation.
    pub fn decode_step(
        &self,
        y_prev: u32,
        state: &DecoderState,
        enc: &EncoderStates,
        visible_len: usize,
    ) -> Result<StepResult> {
        if visible_len < 1 || visible_len > enc.len() {
            return Err(Error::Contract(format!(
                "visible_len {visible_len} outside 1..={}",
                enc.len()
            )));
        }
        self.check_token(y_prev, self.config.target_vocab_size, "target")?;
        let out = decoder_step(&self.weights, &enc.memory, visible_len, y_prev, state);
        Ok(StepResult {
            state: out.state,
            attention: out.attention,
            logits: out.logits,
        })
    }

    /// Teacher-forced cross-attention of the last decoder layer, one row per
    /// reference target token, with the whole source visible.
    pub fn extract_attention(&self, pair: &ParallelPair, mode: EncoderMode) -> Result<AttentionMatrix> {
        if !self.weights.is_finite() {
            return Err(Error::ModelState("model has non-finite parameters".into()));
        }
        self.check_pair(&pair.source, &pair.target)?;
        if pair.target.is_empty() {
            return Err(Error::Contract("empty target sentence".into()));
        }
        let enc = self.encode(&pair.source, mode)?;
        let n = enc.len();
        let mut state = self.initial_state();
        let mut prev = BOS;
        let mut weights = Vec::with_capacity(pair.target.len() * n);
        for &y in &pair.target {
            let step = self.decode_step(prev, &state, &enc, n)?;
            if step.attention.iter().any(|a| !a.is_finite()) {
                return Err(Error::ModelState("attention produced non-finite values".into()));
            }
            weights.extend_from_slice(&step.attention);
            state = step.state;
            prev = y;
        }
        Ok(AttentionMatrix::from_raw(pair.target.len(), n, weights))
    }

    /// Mean teacher-forced cross-entropy per predicted token (EOS included).
    pub fn loss(&self, pair: &ParallelPair) -> Result<f32> {
        self.check_pair(&pair.source, &pair.target)?;
        let sum = net::pair_loss(&self.weights, self.config.encoder_mode, &pair.source, &pair.target, None, None);
        Ok(sum / (pair.target.len() + 1) as f32)
    }

    /// FNV-1a over every parameter's bytes, in manifest order.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.weights.tensors() {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config,
            source_vocab: self.vocabs.as_ref().map(|v| v.0.tokens().to_vec()),
            target_vocab: self.vocabs.as_ref().map(|v| v.1.tokens().to_vec()),
        };
        let names = self.weights.names();
        let tensors: Vec<_> = names.into_iter().zip(self.weights.tensors()).collect();
        let meta = serde_json::to_value(meta).map_err(|e| Error::Data(e.to_string()))?;
        checkpoint::write(path, "seq2seq", meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if c.kind != "seq2seq" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("checkpoint kind is {:?}, expected \"seq2seq\"", c.kind),
            });
        }
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta).map_err(|e| corrupt(format!("bad header: {e}")))?;
        meta.config.validate()?;
        let mut weights = Weights::zeros(&meta.config);
        let names = weights.names();
        if names.len() != c.tensors.len() {
            return Err(corrupt(format!(
                "manifest lists {} tensors, config implies {}",
                c.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), (found_name, t)) in weights.tensors_mut().into_iter().zip(&names).zip(c.tensors) {
            if &found_name != name || slot.shape() != t.shape() {
                return Err(corrupt(format!(
                    "tensor {found_name} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let vocabs = match (meta.source_vocab, meta.target_vocab) {
            (Some(s), Some(t)) => Some((Vocab::from_tokens(s)?, Vocab::from_tokens(t)?)),
            _ => None,
        };
        Ok(Seq2SeqModel {
            config: meta.config,
            weights,
            vocabs,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    source_vocab: Option<Vec<String>>,
    target_vocab: Option<Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: EncoderMode) -> Seq2SeqModel {
        let cfg = ModelConfig {
            d_model: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            encoder_mode: mode,
            source_vocab_size: 10,
            target_vocab_size: 9,
            max_len: 8,
        };
        Seq2SeqModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn causal_prefix_property() {
        let m = tiny(EncoderMode::Causal);
        let full = m.encode(&[4, 5, 6], EncoderMode::Causal).unwrap();
        let two = m.encode(&[4, 5], EncoderMode::Causal).unwrap();
        assert_eq!(full.row(1), two.row(1));
        assert_eq!(full.row(0), two.row(0));
    }

    #[test]
    fn incremental_matches_batch() {
        let m = tiny(EncoderMode::Causal);
        let batch = m.encode(&[4, 7, 5, 9], EncoderMode::Causal).unwrap();
        let mut inc = CausalEncoder::new(&m);
        for t in [4, 7, 5, 9] {
            inc.push(&m, t).unwrap();
        }
        assert_eq!(inc.states(), &batch);
    }

    #[test]
    fn full_mode_depends_on_order() {
        let m = tiny(EncoderMode::Full);
        let ab = m.encode(&[4, 5], EncoderMode::Full).unwrap();
        let ba = m.encode(&[5, 4], EncoderMode::Full).unwrap();
        // position 0 holds a different token, and position 1 sees a different left context
        assert_ne!(ab.row(0), ba.row(1));
        assert_ne!(ab.row(1), ba.row(0));
    }

    #[test]
    fn overlong_input_is_rejected() {
        let m = tiny(EncoderMode::Causal);
        let src = vec![4; 9];
        assert!(matches!(m.encode(&src, EncoderMode::Causal), Err(Error::Length { len: 9, max: 8 })));
        assert!(m.encode(&src[..8], EncoderMode::Causal).is_ok());
    }

    #[test]
    fn full_on_causal_model_is_rejected() {
        let m = tiny(EncoderMode::Causal);
        assert!(m.encode(&[4], EncoderMode::Full).is_err());
    }

    #[test]
    fn single_visible_state_gets_all_attention() {
        let m = tiny(EncoderMode::Causal);
        let enc = m.encode(&[4, 5, 6], EncoderMode::Causal).unwrap();
        let step = m.decode_step(BOS, &m.initial_state(), &enc, 1).unwrap();
        assert_eq!(step.attention, vec![1.0]);
        assert!(m.decode_step(BOS, &m.initial_state(), &enc, 0).is_err());
        assert!(m.decode_step(BOS, &m.initial_state(), &enc, 4).is_err());
    }

    #[test]
    fn masked_states_do_not_matter() {
        let m = tiny(EncoderMode::Causal);
        let a = m.encode(&[4, 5, 6, 7], EncoderMode::Causal).unwrap();
        let b = m.encode(&[4, 5, 9, 9], EncoderMode::Causal).unwrap();
        let s = m.initial_state();
        let x = m.decode_step(BOS, &s, &a, 2).unwrap();
        let y = m.decode_step(BOS, &s, &b, 2).unwrap();
        assert_eq!(x.logits, y.logits);
        assert_eq!(x.state, y.state);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = tiny(EncoderMode::Full);
        let pair = ParallelPair {
            source: vec![4, 5, 6],
            target: vec![4, 5],
            gold_alignment: None,
        };
        let a = m.extract_attention(&pair, EncoderMode::Full).unwrap();
        assert_eq!((a.target_len(), a.source_len()), (2, 3));
        a.check().unwrap();
    }

    #[test]
    fn nan_parameters_are_reported() {
        let mut m = tiny(EncoderMode::Full);
        m.weights.wo.data_mut()[0] = f32::NAN;
        let pair = ParallelPair {
            source: vec![4],
            target: vec![4],
            gold_alignment: None,
        };
        assert!(matches!(m.extract_attention(&pair, EncoderMode::Full), Err(Error::ModelState(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.absm");
        let m = tiny(EncoderMode::Full).with_vocabs(Vocab::new(), Vocab::new());
        m.save(&path).unwrap();
        let back = Seq2SeqModel::load(&path).unwrap();
        assert_eq!(back, m);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Seq2SeqModel::load(&path), Err(Error::Corrupt { .. })));

        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"NOPE");
        std::fs::write(&path, &wrong).unwrap();
        match Seq2SeqModel::load(&path) {
            Err(Error::Magic { expected, .. }) => assert_eq!(expected, "ABSM"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
