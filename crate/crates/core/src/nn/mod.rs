//! Dense numerics and reverse-mode differentiation.

pub mod ops;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use ops::{cosine, cross_entropy, l2_norm, log_softmax_row, matmul, softmax, weighted_cross_entropy};
pub use optim::{Adam, AdamConfig};
pub use rng::{mix_seed, SeededRng, RNG_ALGORITHM};
pub use tape::{AttentionMask, Gradients, Segment, Tape, Var};
pub use tensor::Tensor;
