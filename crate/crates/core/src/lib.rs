//! Binary neural network distillation toolkit.
//!
//! A frozen floating-point feature extractor and a jointly trained
//! classifier supply targets for a binary student network, trained in two
//! stages (binary activations, then binary weights too).

pub mod binary;
pub mod checkpoint;
pub mod data;
pub mod ema;
mod error;
pub mod eval;
pub mod kernels;
pub mod loss;
pub mod networks;
pub mod optim;
pub mod param;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use binary::{BinarizeMode, PackedMatrix, StageMode};
pub use checkpoint::{Checkpoint, StageTag};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
