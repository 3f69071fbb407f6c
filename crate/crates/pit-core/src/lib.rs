//! Learns per-layer dilation factors of temporal convolutional networks by
//! pruning filter time-slices during training, then explores the
//! size-accuracy trade-off from a single seed model.

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod mask;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{PitError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
