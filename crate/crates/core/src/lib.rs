//! Toy-scale laboratory for representation similarity and inference-time layer
//! skipping in autoregressive and masked-diffusion language models.

pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod nn;
pub mod probe;
pub mod skip;
pub mod training;

pub use error::{Error, Result};
