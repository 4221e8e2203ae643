//! Non-parallel voice conversion with a grouped VQ bottleneck and an
//! adversarial speaker classifier, used to generate paired ASR training views.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choices.

pub mod adversary;
pub mod augment;
pub mod autodiff;
pub mod bottleneck;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod scalar;
pub mod signal;
pub mod training;

pub use config::{RunConfig, SweepConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type VcModel32 = model::VcModel<f32>;
pub type VcModel64 = model::VcModel<f64>;
