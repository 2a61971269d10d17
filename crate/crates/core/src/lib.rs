//! Budget-constrained 6D pose estimation as a reinforcement-learning agent.
//!
//! A pool of pose hypotheses is sampled from noisy object-coordinate
//! predictions. A softmax policy over a small energy network decides which
//! hypothesis to refine next until a refinement-step budget runs out, then
//! picks the final estimate. The policy is trained with REINFORCE, either
//! naively or through a precomputed-state estimator that needs one backward
//! pass per reachable hypothesis state regardless of how many episodes are
//! sampled.
//!
//! The geometry and the energy network are generic over [`Real`] (`f32` or
//! `f64`); the pipeline types are exposed as `f64` aliases at the crate root.

pub mod agent;
pub mod config;
pub mod energymodel;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod refine;
pub mod scalar;
pub mod scene;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Pose = geometry::Pose<f64>;
pub type Correspondence = geometry::Correspondence<f64>;
pub type ObjectModel = geometry::ObjectModel<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type EnergyNet = energymodel::EnergyNet<f64>;
