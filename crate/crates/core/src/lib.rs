//! Few-shot defect segmentation and classification for SEM images with a
//! dual-path vision transformer and prompt-ensembled text embeddings.

pub mod cls;
pub mod config;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod layers;
pub mod numerics;
pub mod pipeline;
pub mod seg;
pub mod store;
pub mod synth;
pub mod text;
pub mod tuner;
pub mod vit;

pub use error::{Error, Result};
pub use numerics::Tensor;
