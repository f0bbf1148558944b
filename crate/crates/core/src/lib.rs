//! Salient object detection with pyramid self-attention, built on a small
//! define-by-run autodiff engine.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pick a concrete precision.

pub mod attention;
pub mod autodiff;
pub mod channel_attention;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod psam;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, Variant};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
