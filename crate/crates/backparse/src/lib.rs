//! Desk-scale cross-lingual data augmentation for semantic parsing.
//!
//! The pipeline trains per-language decoder adapters on a small seq2seq
//! transformer with a source-switched denoising objective, synthesizes
//! target-language utterances from source meaning representations, filters
//! them by round-trip parse consistency, and measures the augmentation's
//! effect on a downstream parser. Everything runs on procedurally generated
//! toy language families so results are cheap to reproduce and check.

pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};

/// Training scalar type. The numerics stack is generic; training runs in f32
/// with f64 reductions, gradient checks instantiate the same code at f64.
pub type F = f32;
pub type Tensor = numerics::Tensor<F>;
pub type Tape = numerics::Tape<F>;
