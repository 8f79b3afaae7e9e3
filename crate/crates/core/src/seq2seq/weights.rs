use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Bidirectional: each state sees the whole source.
    Full,
    /// Left-to-right only: state `j` depends on `x_1..x_j`.
    Causal,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EncoderMode::Full),
            "causal" => Ok(EncoderMode::Causal),
            other => Err(Error::config(
                "encoder_mode",
                format!("expected `full` or `causal`, got {other:?}"),
            )),
        }
    }
}

impl std::fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderMode::Full => "full",
            EncoderMode::Causal => "causal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub encoder_mode: EncoderMode,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 + 2 layers, width 64.
    pub fn new(source_vocab_size: usize, target_vocab_size: usize, max_len: usize, mode: EncoderMode) -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            encoder_mode: mode,
            source_vocab_size,
            target_vocab_size,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 8 || !self.d_model.is_multiple_of(2) {
            return Err(Error::config("d_model", "must be even and at least 8"));
        }
        if self.n_enc_layers < 1 {
            return Err(Error::config("n_enc_layers", "must be at least 1"));
        }
        if self.n_dec_layers < 1 {
            return Err(Error::config("n_dec_layers", "must be at least 1"));
        }
        if self.source_vocab_size < 5 || self.target_vocab_size < 5 {
            return Err(Error::config(
                "vocab_size",
                "vocabularies need at least one token beyond the reserved four",
            ));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len", "must be at least 3"));
        }
        Ok(())
    }
}

/// One GRU cell. Gate blocks are laid out `[reset | update | candidate]`
/// along the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    pub wx: Tensor<T>,
    pub wh: Tensor<T>,
    pub bx: Tensor<T>,
    pub bh: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub fwd: Gru<T>,
    pub bwd: Option<Gru<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    /// Query projection applied to the previous decoder state.
    pub wq: Tensor<T>,
    /// Key projection applied to encoder states.
    pub wk: Tensor<T>,
    /// Input is `[layer input ; context]`.
    pub gru: Gru<T>,
    /// Initial decoder state.
    pub init: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub src_emb: Tensor<T>,
    pub tgt_emb: Tensor<T>,
    pub enc: Vec<EncoderLayer<T>>,
    pub dec: Vec<DecoderLayer<T>>,
    /// Output projection over `[s_i ; c_i]`.
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Real> Gru<T> {
    fn zeros(input: usize, d: usize) -> Self {
        Gru {
            wx: Tensor::zeros(&[input, 3 * d]),
            wh: Tensor::zeros(&[d, 3 * d]),
            bx: Tensor::zeros(&[3 * d]),
            bh: Tensor::zeros(&[3 * d]),
        }
    }
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let bidir = cfg.encoder_mode == EncoderMode::Full;
        Weights {
            src_emb: Tensor::zeros(&[cfg.source_vocab_size, d]),
            tgt_emb: Tensor::zeros(&[cfg.target_vocab_size, d]),
            enc: (0..cfg.n_enc_layers)
                .map(|_| EncoderLayer {
                    fwd: Gru::zeros(d, d),
                    bwd: bidir.then(|| Gru::zeros(d, d)),
                })
                .collect(),
            dec: (0..cfg.n_dec_layers)
                .map(|_| DecoderLayer {
                    wq: Tensor::zeros(&[d, d]),
                    wk: Tensor::zeros(&[d, d]),
                    gru: Gru::zeros(2 * d, d),
                    init: Tensor::zeros(&[d]),
                })
                .collect(),
            wo: Tensor::zeros(&[2 * d, cfg.target_vocab_size]),
            bo: Tensor::zeros(&[cfg.target_vocab_size]),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        fn gru<T>(p: &str, g: &Gru<T>, f: &mut impl FnMut(&str, &Tensor<T>)) {
            f(&format!("{p}.wx"), &g.wx);
            f(&format!("{p}.wh"), &g.wh);
            f(&format!("{p}.bx"), &g.bx);
            f(&format!("{p}.bh"), &g.bh);
        }
        f("src_emb", &self.src_emb);
        f("tgt_emb", &self.tgt_emb);
        for (l, layer) in self.enc.iter().enumerate() {
            gru(&format!("enc.{l}.fwd"), &layer.fwd, &mut f);
            if let Some(b) = &layer.bwd {
                gru(&format!("enc.{l}.bwd"), b, &mut f);
            }
        }
        for (l, layer) in self.dec.iter().enumerate() {
            f(&format!("dec.{l}.wq"), &layer.wq);
            f(&format!("dec.{l}.wk"), &layer.wk);
            gru(&format!("dec.{l}.gru"), &layer.gru, &mut f);
            f(&format!("dec.{l}.init"), &layer.init);
        }
        f("out.w", &self.wo);
        f("out.b", &self.bo);
    }

    /// Mutable tensors in the same order as [`Weights::visit`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.src_emb, &mut self.tgt_emb];
        for layer in &mut self.enc {
            let EncoderLayer { fwd, bwd } = layer;
            out.extend([&mut fwd.wx, &mut fwd.wh, &mut fwd.bx, &mut fwd.bh]);
            if let Some(b) = bwd {
                out.extend([&mut b.wx, &mut b.wh, &mut b.bx, &mut b.bh]);
            }
        }
        for layer in &mut self.dec {
            let DecoderLayer { wq, wk, gru, init } = layer;
            out.extend([wq, wk, &mut gru.wx, &mut gru.wh, &mut gru.bx, &mut gru.bh, init]);
        }
        out.push(&mut self.wo);
        out.push(&mut self.bo);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n.to_string()));
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        // visit hands out references tied to &self
        fn collect<'a, T: Real>(w: &'a Weights<T>, out: &mut Vec<&'a Tensor<T>>) {
            out.push(&w.src_emb);
            out.push(&w.tgt_emb);
            for layer in &w.enc {
                let g = &layer.fwd;
                out.extend([&g.wx, &g.wh, &g.bx, &g.bh]);
                if let Some(g) = &layer.bwd {
                    out.extend([&g.wx, &g.wh, &g.bx, &g.bh]);
                }
            }
            for layer in &w.dec {
                let g = &layer.gru;
                out.extend([&layer.wq, &layer.wk, &g.wx, &g.wh, &g.bx, &g.bh, &layer.init]);
            }
            out.push(&w.wo);
            out.push(&w.bo);
        }
        collect(self, &mut out);
        out
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let mut out = Weights::<U> {
            src_emb: self.src_emb.cast(),
            tgt_emb: self.tgt_emb.cast(),
            enc: Vec::new(),
            dec: Vec::new(),
            wo: self.wo.cast(),
            bo: self.bo.cast(),
        };
        let g = |g: &Gru<T>| Gru {
            wx: g.wx.cast(),
            wh: g.wh.cast(),
            bx: g.bx.cast(),
            bh: g.bh.cast(),
        };
        out.enc = self
            .enc
            .iter()
            .map(|l| EncoderLayer {
                fwd: g(&l.fwd),
                bwd: l.bwd.as_ref().map(g),
            })
            .collect();
        out.dec = self
            .dec
            .iter()
            .map(|l| DecoderLayer {
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                gru: g(&l.gru),
                init: l.init.cast(),
            })
            .collect();
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }
}

impl Weights<f32> {
    /// Random initialization: Xavier-uniform matrices, small uniform
    /// embeddings, zero biases and initial states.
    pub fn init(cfg: &ModelConfig, rng: &mut SplitMix64) -> Self {
        let mut w = Weights::zeros(cfg);
        let d = cfg.d_model;
        let emb_limit = (3.0 / d as f32).sqrt();
        for t in w.tensors_mut() {
            let shape = t.shape().to_vec();
            if shape.len() != 2 {
                continue;
            }
            let limit = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
            for x in t.data_mut() {
                *x = rng.symmetric_f32(limit);
            }
        }
        for x in w.src_emb.data_mut().iter_mut().chain(w.tgt_emb.data_mut()) {
            *x = rng.symmetric_f32(emb_limit);
        }
        w
    }
}
