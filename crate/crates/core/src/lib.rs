//! Desk-scale activation steering for neural PDE surrogates.
//!
//! The pipeline: generate contrasting regimes ([`pde`]), train a small
//! spatiotemporal transformer on them ([`surrogate`]), extract
//! difference-of-means concept directions from its residual stream
//! ([`concepts`]), inject them during autoregressive rollouts ([`steering`])
//! and quantify the effect ([`metrics`]).
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the storage precision used by the tooling.

pub mod activation;
mod binio;
pub mod concepts;
pub mod error;
pub mod metrics;
pub mod pde;
pub mod scalar;
pub mod steering;
pub mod surrogate;

pub use error::{Error, Result};
pub use activation::LayerId;
pub use scalar::Scalar;

pub type Trajectory = pde::SimulationTrajectory<f32>;
pub type Surrogate = surrogate::Surrogate<f32>;
pub type Checkpoint = surrogate::Checkpoint<f32>;
pub type Activation = activation::ActivationTensor<f32>;
pub type Direction = concepts::ConceptDirection<f32>;
