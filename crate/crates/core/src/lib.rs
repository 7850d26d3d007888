//! Intent-conditioned flow-matching policies with multi-intent group-relative
//! preference optimization, on synthetic multimodal driving scenes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod flowpolicy;
pub mod geometry;
pub mod grpo;
pub mod hash;
pub mod intent;
pub mod optim;
pub mod reward;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Point = geometry::Point<f64>;
pub type Trajectory = geometry::Trajectory<f64>;
pub type Scene = scene::Scene<f64>;
pub type RaterAnnotation = scene::RaterAnnotation<f64>;
pub type IntentClassifier = intent::IntentClassifier<f64>;
pub type PolicyParams = flowpolicy::PolicyParams<f64>;
pub type SampledPath = flowpolicy::SampledPath<f64>;
pub type Checkpoint = flowpolicy::Checkpoint<f64>;
pub type Adam = optim::Adam<f64>;
pub type RolloutGroup = grpo::RolloutGroup<f64>;
pub type GrpoLoss = grpo::GrpoLoss<f64>;
