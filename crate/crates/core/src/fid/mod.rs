//! Fusion-in-decoder reader.
//!
//! Each retrieved passage is encoded together with the question and visual
//! context, the encoder outputs are concatenated row-wise, and a single
//! decoder cross-attends over the whole concatenation. Forward and backward
//! passes are hand-written on top of `ndarray`; the model is generic over
//! `f32` (training, checkpoints) and `f64` (gradient checks).

mod checkpoint;
mod layers;
mod model;
mod params;
mod tokenizer;
mod train;

use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{
    attribution_from_maps, fuse, mean_nll, EncodedPassage, FidModel, FusedState, Memory,
};
pub use params::{
    AttentionParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams, LayerNormParams,
    ParamTree, Params,
};
pub use tokenizer::{build_input, input_text, words, InputSequence, Tokenizer, BOS, EOS, PAD, UNK};
pub use train::{
    learning_rate, train, AdamW, OptimizerConfig, Schedule, TrainExample, TrainReport,
};

use crate::error::{Error, Result};

/// Floating-point element type of the model.
pub trait Real: NdFloat + FromPrimitive + Default + Sum {}

impl<T: NdFloat + FromPrimitive + Default + Sum> Real for T {}

#[inline]
pub(crate) fn real<R: Real>(x: f64) -> R {
    R::from_f64(x).expect("representable")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Vocabulary size including the four special tokens. In a pipeline
    /// config this is an upper bound; the built vocabulary may be smaller.
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_input_len: usize,
    pub max_decode_len: usize,
    /// Project decoder states onto the token embeddings, scaled by
    /// `1/sqrt(hidden)`, instead of a separate output matrix.
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32_000,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 256,
            max_input_len: 300,
            max_decode_len: 20,
            tie_embeddings: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.vocab_size <= UNK as usize {
            return bad("vocab_size must exceed the special tokens");
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn_hidden == 0 {
            return bad("layers and ffn_hidden must be positive");
        }
        if self.max_input_len == 0 || self.max_decode_len == 0 {
            return bad("max_input_len and max_decode_len must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
