//! Federated segmentation stress testing.
//!
//! A small 2D U-Net is trained across simulated hospital clients whose images
//! are distorted by graded appearance shifts. FedAvg, FedProx and FedBN are
//! compared with worst-client and inter-client disparity metrics reported next
//! to the usual mean Dice.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for runs, `f64` for
//! gradient checks); the aliases below name the two instantiations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod federated;
pub mod heterogeneity;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod tensor;

mod binio;

pub use error::{Error, Result};
pub use params::{ParamTag, ParameterSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParameterSet32 = ParameterSet<f32>;
pub type ParameterSet64 = ParameterSet<f64>;
pub type Case32 = data::Case<f32>;
pub type Case64 = data::Case<f64>;
