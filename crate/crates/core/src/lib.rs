//! Prompt offset tuning for privacy-aware few-shot class-incremental skeleton
//! action recognition.
//!
//! A graph backbone is trained once on the base classes and frozen. Every later user
//! session adapts it only through a pool of learnable prompts that are selected per
//! input by an ordered, vector-quantized query/key lookup and added to the input
//! feature embedding.

pub mod autograd;
pub mod backbone;
pub mod codebook;
pub mod data;
pub mod error;
pub mod metrics;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
