//! Desk-scale multimodal note representations: a reverse-mode autodiff core,
//! a toy multimodal LLM encoder, contrastive training, attention saliency and
//! item-to-item retrieval evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`/`f64`); the `*64`
//! aliases below are the double-precision instantiations used for training.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Double precision: training, gradient checks and checkpoints.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type NoteInput64 = model::NoteInput<f64>;
pub type Trainer64 = train::Trainer<f64>;
pub type TrainState64 = train::TrainState<f64>;
pub type Checkpoint64 = train::Checkpoint<f64>;

/// Single precision, for inference experiments at half the memory.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type Model32 = model::Model<f32>;
