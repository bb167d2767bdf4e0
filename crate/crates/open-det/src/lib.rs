//! Open-ended object detection on synthetic scenes.
//!
//! Detects objects and generates their category names free-form, with no
//! vocabulary given at inference. The pipeline: a small conv backbone and
//! transformer encoder, threshold-based query selection, a decoupled decoder
//! (one-to-many matching in the first four layers, one-to-one in the last
//! two), bidirectional vision-language alignment against a frozen text
//! encoder stub, prompt distillation into text-embedding space, and a toy
//! seq2seq generator with a LoRA head and text-denoising training.
//!
//! See the `examples/` directory for runnable entry points for each
//! capability, or the `opendet` binary for the CLI.

pub mod aligner;
pub mod boxes;
pub mod error;
pub mod graph;
pub mod losses;
pub mod matcher;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
