//! Inlier-driven hypothesis refinement.
//!
//! One inner step finds the pixels whose predicted object coordinate lands
//! within a threshold of the observed camera point under the current pose and
//! re-fits the pose on them. Steps repeat until the inlier count stops growing
//! or the per-call cap is reached.

use crate::geometry::{self, vertex_distance_error};
use crate::scene::SyntheticScene;
use crate::Pose;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementResult {
    pub refined_pose: Pose,
    /// Inner steps consumed; this is what the budget is charged.
    pub steps_used: u32,
    /// Inlier count observed at each inner step.
    pub inlier_counts: Vec<usize>,
    /// Vertex distance between the input and the refined pose.
    pub moved_distance: f64,
}

/// Indices of pixels with `‖pose·y_i − c_i‖ < threshold`.
pub fn find_inliers(scene: &SyntheticScene, pose: &Pose, inlier_threshold: f64) -> Vec<usize> {
    let limit = inlier_threshold * inlier_threshold;
    scene
        .object_coords()
        .iter()
        .zip(scene.camera_coords())
        .enumerate()
        .filter(|(_, (y, c))| {
            let d = pose.apply(y) - *c;
            // `limit` is +inf for an infinite threshold and every finite distance passes.
            d.norm_squared() < limit
        })
        .map(|(i, _)| i)
        .collect()
}

/// Inlier statistics of a pose: count and mean residual of the inliers.
pub fn inlier_statistics(
    scene: &SyntheticScene,
    pose: &Pose,
    inlier_threshold: f64,
) -> (usize, f64) {
    let limit = inlier_threshold * inlier_threshold;
    let (count, sum) = scene
        .object_coords()
        .iter()
        .zip(scene.camera_coords())
        .fold((0usize, 0.0f64), |(n, s), (y, c)| {
            let d2 = (pose.apply(y) - *c).norm_squared();
            if d2 < limit {
                (n + 1, s + d2.sqrt())
            } else {
                (n, s)
            }
        });
    let mean = if count == 0 { 0.0 } else { sum / count as f64 };
    (count, mean)
}

/// Iterated inlier re-fit.
///
/// Every inner step counts against `m_max`, including a step that only
/// discovers the inlier set did not grow, and a first step that finds fewer
/// than three inliers (the pose is then returned unchanged).
pub fn refine(
    scene: &SyntheticScene,
    pose: &Pose,
    m_max: u32,
    inlier_threshold: f64,
) -> RefinementResult {
    assert!(m_max >= 1, "m_max must be at least 1");
    let mut current = *pose;
    let mut inlier_counts = Vec::new();
    let mut steps_used = 0;
    while steps_used < m_max {
        steps_used += 1;
        let inliers = find_inliers(scene, &current, inlier_threshold);
        let count = inliers.len();
        let grew = inlier_counts.last().is_none_or(|&prev| count > prev);
        inlier_counts.push(count);
        if !grew || count < 3 {
            break;
        }
        if let Ok(fit) =
            geometry::kabsch_indexed(scene.object_coords(), scene.camera_coords(), &inliers)
        {
            current = fit;
        }
    }
    RefinementResult {
        moved_distance: vertex_distance_error(pose, &current, &scene.model),
        refined_pose: current,
        steps_used,
        inlier_counts,
    }
}
