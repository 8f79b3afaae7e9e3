//! Streaming translation from a non-streaming encoder-decoder.
//!
//! Pipeline: train a seq2seq model, read its cross-attention as soft
//! alignments, turn those into read/write pseudo-labels, fine-tune the
//! model on sources cut at those labels, fit a small bilinear read/write
//! classifier on the frozen model's states, then decode incrementally with
//! greedy or beam search and measure BLEU and Average Lagging.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, Result};
