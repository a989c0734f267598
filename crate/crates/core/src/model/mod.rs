//! Decoder-style transformer with causal or bidirectional attention,
//! per-block bypass and hidden-state capture.

mod config;
mod forward;
mod io;
mod params;

pub use config::{AttentionMode, ModelConfig, Regime, SkipSet};
pub use forward::{block_forward, forward, forward_batch, ForwardOutput, HiddenStateTrace};
pub(crate) use forward::{forward_on_tape, PackedBatch, ParamVars};
pub use io::{FORMAT_VERSION, MAGIC};
pub use params::{BlockParams, Checkpoint, ModelParams};
