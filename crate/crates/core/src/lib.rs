//! Class-specific prompt attention maps on a frozen Vision Transformer.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod interpret;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod suites;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
