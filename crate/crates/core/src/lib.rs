//! Group-fused Transformer for sequence-to-sequence translation.
//!
//! Encoder and decoder layers are partitioned into groups. The decoder
//! cross-attends to a learned fusion of the encoder group outputs, and every
//! decoder group emits its own vocabulary distribution; the distributions are
//! mixed with learned temperature-softmax weights. Everything runs on the
//! crate's own reverse-mode autodiff tape.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod inference;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autograd::{finite_diff_grad, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use model::{multi_level_loss, EncoderOutput, GroupPrediction, Model, ModelConfig};
pub use nn::NormStyle;
pub use scalar::Scalar;
pub use tensor::{ParamId, ParamStore, Tensor};
