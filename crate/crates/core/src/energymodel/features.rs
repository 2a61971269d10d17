use serde::{Deserialize, Serialize};

use crate::geometry::vertex_distance_error;
use crate::refine::{inlier_statistics, RefinementResult};
use crate::scalar::Real;
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::Pose;

pub const FEATURE_DIM: usize = 5;

/// Context features of one hypothesis state.
///
/// The first three describe the hypothesis history (times refined, last
/// move, spread relative to the original pool); the last two summarize how
/// well the pose explains the pixel predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// τ / τ_max.
    pub times_refined: f64,
    /// Distance moved by the last refinement, in model diameters.
    pub last_move_distance: f64,
    /// Mean distance of the unrefined hypothesis to the rest of the original pool, in diameters.
    pub mean_pool_distance: f64,
    pub inlier_fraction: f64,
    /// Mean inlier residual in units of the inlier threshold; 1 when there are no inliers.
    pub mean_inlier_residual: f64,
}

impl FeatureVector {
    pub fn to_array<T: Real>(&self) -> [T; FEATURE_DIM] {
        [
            T::of(self.times_refined),
            T::of(self.last_move_distance),
            T::of(self.mean_pool_distance),
            T::of(self.inlier_fraction),
            T::of(self.mean_inlier_residual),
        ]
    }
}

/// Per-scene quantities shared by every state of every hypothesis.
#[derive(Clone, Debug)]
pub struct FeatureContext {
    pub inlier_threshold: f64,
    pub tau_max: u32,
    pool_distances: Vec<f64>,
}

impl FeatureContext {
    pub fn new(
        scene: &SyntheticScene,
        pool: &HypothesisPool,
        inlier_threshold: f64,
        tau_max: u32,
    ) -> Self {
        let n = pool.pool_size();
        let diameter = scene.model.diameter();
        let mut sums = vec![0.0; n];
        for a in 0..n {
            for b in a + 1..n {
                let d = vertex_distance_error(pool.get(a), pool.get(b), &scene.model);
                sums[a] += d;
                sums[b] += d;
            }
        }
        let pool_distances = sums
            .into_iter()
            .map(|s| {
                if n > 1 {
                    s / ((n - 1) as f64 * diameter)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            inlier_threshold,
            tau_max,
            pool_distances,
        }
    }

    pub fn pool_distance(&self, index: usize) -> f64 {
        self.pool_distances[index]
    }
}

/// Features of hypothesis `index` at pose `pose` after `tau` refinements;
/// `last` is the refinement that produced `pose` (absent when `tau == 0`).
pub fn featurize(
    ctx: &FeatureContext,
    scene: &SyntheticScene,
    index: usize,
    pose: &Pose,
    last: Option<&RefinementResult>,
    tau: u32,
) -> FeatureVector {
    let diameter = scene.model.diameter();
    let (count, mean_residual) = inlier_statistics(scene, pose, ctx.inlier_threshold);
    let last_move_distance = match (tau, last) {
        (0, _) | (_, None) => 0.0,
        (_, Some(r)) => r.moved_distance / diameter,
    };
    FeatureVector {
        times_refined: if ctx.tau_max == 0 {
            0.0
        } else {
            tau as f64 / ctx.tau_max as f64
        },
        last_move_distance,
        mean_pool_distance: ctx.pool_distance(index),
        inlier_fraction: count as f64 / scene.len() as f64,
        mean_inlier_residual: if count == 0 {
            1.0
        } else {
            mean_residual / ctx.inlier_threshold
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::refine;
    use crate::scene::{generate_scene, sample_hypothesis_pool, SceneConfig};

    #[test]
    fn fresh_hypothesis() {
        let scene = generate_scene(&SceneConfig::default(), 0, 1).unwrap();
        let pool = sample_hypothesis_pool(&scene, 10, 2).unwrap();
        let ctx = FeatureContext::new(&scene, &pool, 2.5 * scene.noise_sigma, 3);
        let f = featurize(&ctx, &scene, 0, pool.get(0), None, 0);
        assert_eq!(f.last_move_distance, 0.0);
        assert_eq!(f.times_refined, 0.0);
        assert!(f.mean_pool_distance > 0.0);

        let r = refine(&scene, pool.get(0), 10, ctx.inlier_threshold);
        let g = featurize(&ctx, &scene, 0, &r.refined_pose, Some(&r), 1);
        assert!((g.times_refined - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.mean_pool_distance, f.mean_pool_distance);
        assert!((g.last_move_distance - r.moved_distance / scene.model.diameter()).abs() < 1e-15);
    }

    #[test]
    fn truth_on_clean_scene() {
        let cfg = SceneConfig {
            noise_fraction: 0.0,
            outlier_rate: 0.3,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 0, 6).unwrap();
        let pool = HypothesisPool::new(vec![scene.truth]);
        let ctx = FeatureContext::new(&scene, &pool, 1e-6, 3);
        let f = featurize(&ctx, &scene, 0, &scene.truth, None, 0);
        let inlier_share = (scene.len() - scene.outlier_count()) as f64 / scene.len() as f64;
        assert_eq!(f.inlier_fraction, inlier_share);
        assert!(f.mean_inlier_residual < 1e-6);
    }

    #[test]
    fn duplicate_poses_share_pool_distance() {
        let scene = generate_scene(&SceneConfig::default(), 0, 1).unwrap();
        let mut pool = sample_hypothesis_pool(&scene, 6, 2).unwrap();
        pool.hypotheses[4] = pool.hypotheses[1];
        let ctx = FeatureContext::new(&scene, &pool, 0.01, 3);
        assert!((ctx.pool_distance(1) - ctx.pool_distance(4)).abs() < 1e-15);
    }
}
