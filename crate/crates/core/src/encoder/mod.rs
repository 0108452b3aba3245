//! Character-level transformer encoder with a masked language model head.
//!
//! Parameters live in one flat buffer ([`ParamLayout`] maps names to
//! slices), which keeps the optimizer, checkpoints, checksums and gradient
//! checks trivial. The model is generic over [`Real`] so the same code runs
//! in `f32` for training and analysis and in `f64` for numerical checks.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod mlm;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::PathBuf;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

use crate::corpus::CorpusError;

pub(crate) use adam::clip_grad_norm;
pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST, CHECKPOINT_PARAMS, CHECKPOINT_VOCAB};
pub use forward::{attention_head, embed, EmbeddingTables, ForwardCache, ForwardTrace};
pub(crate) use mlm::{argmax, batch_gradient, warmup_lr};
pub use mlm::{mask_batch, mask_sequence, masked_accuracy, train_mlm, MaskedSequence, MlmHyper, MlmTraining};
pub use params::{Encoder, LayerSlots, ParamLayout, Slot};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token or segment id {id} out of range (limit {limit})")]
    IdOutOfRange { id: u32, limit: usize },
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no masked positions")]
    NoMaskedPositions,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab_size: usize,
    /// Maximum sequence length including `[CLS]` and `[SEP]`.
    pub max_len: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, width 128, 64 positions.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig { layers: 4, heads: 4, dim: 128, vocab_size, max_len: 64, dropout: 0.1, seed: 42 }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.into()));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.vocab_size == 0 {
            return bad("layers, heads, dim and vocab_size must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Same architecture and vocabulary; seed and dropout may differ.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.layers == other.layers
            && self.heads == other.heads
            && self.dim == other.dim
            && self.vocab_size == other.vocab_size
            && self.max_len == other.max_len
    }
}
