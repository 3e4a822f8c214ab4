//! From-scratch tensor engine and SAM/HESAM nodule classifier.
//!
//! The engine is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and in `f64` for finite-difference verification.

pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod saliency;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Fusion, HeadKind, Model, ModelConfig, Pooling};
pub use saliency::{AttentionMap, MapMethod};
pub use scalar::Scalar;
pub use tensor::{PoolMode, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
