//! Trainable scoring of hypothesis states.
//!
//! A small fully connected network maps a five-entry feature vector to two
//! energies: `E` drives refinement choices and `E′` the final decision.

mod features;
mod net;

pub use features::{featurize, FeatureContext, FeatureVector, FEATURE_DIM};
pub use net::{
    Activations, EnergyNet, ModelFile, TrainingState, MODEL_FORMAT_VERSION, PARAM_ORDERING_VERSION,
};

use crate::geometry::vertex_distance_error;
use crate::scene::SyntheticScene;
use crate::Pose;

/// Everything a scorer may look at for one hypothesis state.
pub struct ScoreInput<'a> {
    pub scene: &'a SyntheticScene,
    pub pose: &'a Pose,
    pub features: &'a FeatureVector,
}

/// Source of the two energies `(E, E′)` of a hypothesis state.
pub trait Scorer: Sync {
    fn score(&self, input: &ScoreInput<'_>) -> (f64, f64);
}

impl Scorer for EnergyNet<f64> {
    fn score(&self, input: &ScoreInput<'_>) -> (f64, f64) {
        self.forward(&input.features.to_array())
    }
}

/// Cheating scorer that reads the ground truth: energy is the negative pose
/// error in diameters, times `sharpness`. Used only as an upper-bound sanity check.
#[derive(Clone, Copy, Debug)]
pub struct OracleScorer {
    pub sharpness: f64,
}

impl Scorer for OracleScorer {
    fn score(&self, input: &ScoreInput<'_>) -> (f64, f64) {
        let scene = input.scene;
        let err =
            vertex_distance_error(input.pose, &scene.truth, &scene.model) / scene.model.diameter();
        let e = -self.sharpness * err;
        (e, e)
    }
}
