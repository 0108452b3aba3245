//! Word-structure analysis for character-level transformer encoders.
//!
//! The crate trains a small character-level encoder with a masked language
//! model objective, then measures how much word information it carries:
//!
//! * [`attn_stats`] computes attention-distribution statistics against gold
//!   word boundaries (specific characters, first/last characters of words,
//!   and character-to-word windows) and aggregates them per layer and head.
//! * [`probe`] trains linear BMES classifiers on frozen per-layer hidden
//!   states and reports span-level segmentation F1 for every layer.
//! * [`finetune`] fine-tunes the encoder on downstream task heads and
//!   re-runs the probe sweep to see how word information shifts.
//! * [`dumps`] reads and writes a bit-exact trace archive so representations
//!   exported from other runtimes go through the same analysis.

pub mod attn_stats;
pub mod cli;
pub mod corpus;
pub mod dumps;
pub mod encoder;
pub mod exec;
pub mod finetune;
pub mod probe;

pub use corpus::{BmesLabel, CharVocab, CorpusStats, SegmentedSentence};
pub use encoder::{Encoder, ForwardTrace, ModelConfig};
pub use exec::Exec;
