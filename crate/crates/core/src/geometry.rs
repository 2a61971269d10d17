//! Rigid poses, the Kabsch absolute-orientation solver and pose-error metrics.

use nalgebra::{Matrix3, Matrix3xX, UnitQuaternion, Vector3, Vector4};
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative singular-value floor below which a point set counts as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-9;

/// Default correctness threshold, as a fraction of the model diameter.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.1;

/// Rigid transform mapping object-frame points into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation by `angle` radians about `axis` (normalized internally), then translation.
    pub fn from_axis_angle(axis: Vector3<T>, angle: T, translation: Vector3<T>) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        let rotation = nalgebra::Rotation3::from_axis_angle(&axis, angle);
        Self::new(rotation.into_inner(), translation)
    }

    pub fn apply(&self, point: &Vector3<T>) -> Vector3<T> {
        self.rotation * point + self.translation
    }

    /// `self ∘ inner`: first apply `inner`, then `self`.
    pub fn compose(&self, inner: &Pose<T>) -> Pose<T> {
        Pose {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> T {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let worst = gram
            .iter()
            .fold(T::zero(), |acc, v| Float::max(acc, Float::abs(*v)));
        Float::max(worst, Float::abs(self.rotation.determinant() - T::one()))
    }

    /// Projects the rotation back onto SO(3) (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> Pose<T> {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let d = if (u * v_t).determinant() < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        let correction = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), d));
        Pose::new(u * correction * v_t, self.translation)
    }

    /// Geodesic angle (radians) of the relative rotation `self · otherᵀ`.
    ///
    /// Uses the chord formula `θ = 2·asin(‖R₁ − R₂‖_F / 2√2)`, which stays
    /// accurate for tiny angles where the trace formula loses half its digits.
    pub fn rotation_angle_to(&self, other: &Pose<T>) -> T {
        let chord = (self.rotation - other.rotation).norm();
        let two = T::of(2.0);
        let s = Float::min(chord / (two * Float::sqrt(two)), T::one());
        two * Float::asin(s)
    }

    pub fn translation_distance(&self, other: &Pose<T>) -> T {
        (self.translation - other.translation).norm()
    }

    /// Row-major rotation followed by the translation: 12 numbers.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)].to_f64_lossy();
            }
            out[9 + r] = self.translation[r].to_f64_lossy();
        }
        out
    }

    pub fn from_array(values: &[f64; 12]) -> Pose<T> {
        let rotation = Matrix3::from_fn(|r, c| T::of(values[r * 3 + c]));
        let translation = Vector3::new(T::of(values[9]), T::of(values[10]), T::of(values[11]));
        Pose::new(rotation, translation)
    }
}

impl Pose<f64> {
    /// Rotation drawn uniformly from SO(3) (normalized Gaussian quaternion),
    /// translation uniform in the axis-aligned box `[lo, hi]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        Pose::new(
            random_rotation(rng),
            Vector3::from_fn(|i, _| rng.random_range(lo[i]..=hi[i])),
        )
    }
}

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Vector4::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
        if q.norm() > 1e-6 {
            let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
            return UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

/// One 3D-3D correspondence between a predicted object coordinate and an observed camera point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence<T: Real> {
    pub object_point: Vector3<T>,
    pub camera_point: Vector3<T>,
}

impl<T: Real> Correspondence<T> {
    pub fn new(object_point: Vector3<T>, camera_point: Vector3<T>) -> Self {
        Self {
            object_point,
            camera_point,
        }
    }
}

/// Singular values (descending) of a set of points after removing their centroid.
fn centered_singular_values<T: Real>(points: &[Vector3<T>]) -> Vector3<T> {
    let n = T::of(points.len() as f64);
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let centered = Matrix3xX::from_fn(points.len(), |r, c| points[c][r] - centroid[r]);
    let mut sv: Vec<T> = centered.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv.resize(3, T::zero());
    Vector3::new(sv[0], sv[1], sv[2])
}

/// True when the points span at most a line (second singular value negligible).
pub fn is_collinear<T: Real>(points: &[Vector3<T>]) -> bool {
    let sv = centered_singular_values(points);
    sv[0] <= T::zero() || sv[1] < T::of(DEGENERACY_RATIO) * sv[0]
}

/// True when the points span at most a plane.
pub fn is_coplanar<T: Real>(points: &[Vector3<T>]) -> bool {
    let sv = centered_singular_values(points);
    sv[0] <= T::zero() || sv[2] < T::of(DEGENERACY_RATIO) * sv[0]
}

/// Least-squares rigid transform taking object points onto camera points.
///
/// Reflections are removed with the usual determinant-sign flip on the
/// smallest singular direction, so the result is always a proper rotation.
pub fn kabsch<T: Real>(correspondences: &[Correspondence<T>]) -> Result<Pose<T>> {
    if correspondences.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "kabsch needs at least 3 correspondences, got {}",
            correspondences.len()
        )));
    }
    let objects: Vec<Vector3<T>> = correspondences.iter().map(|c| c.object_point).collect();
    if is_collinear(&objects) {
        return Err(Error::DegenerateInput("object points are collinear".into()));
    }
    let n = T::of(correspondences.len() as f64);
    let (obj_sum, cam_sum) = correspondences
        .iter()
        .fold((Vector3::zeros(), Vector3::zeros()), |(o, c), k| {
            (o + k.object_point, c + k.camera_point)
        });
    let obj_centroid = obj_sum / n;
    let cam_centroid = cam_sum / n;

    let mut covariance = Matrix3::<T>::zeros();
    for c in correspondences {
        covariance += (c.object_point - obj_centroid) * (c.camera_point - cam_centroid).transpose();
    }
    rotation_from_covariance(&covariance).map(|rotation| {
        let translation = cam_centroid - rotation * obj_centroid;
        Pose::new(rotation, translation)
    })
}

/// Kabsch over index-selected correspondences without materializing them.
pub(crate) fn kabsch_indexed<T: Real>(
    object_points: &[Vector3<T>],
    camera_points: &[Vector3<T>],
    indices: &[usize],
) -> Result<Pose<T>> {
    let pairs: Vec<Correspondence<T>> = indices
        .iter()
        .map(|&i| Correspondence::new(object_points[i], camera_points[i]))
        .collect();
    kabsch(&pairs)
}

fn rotation_from_covariance<T: Real>(covariance: &Matrix3<T>) -> Result<Matrix3<T>> {
    let svd = covariance.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let d = if (v * u.transpose()).determinant() < T::zero() {
        -T::one()
    } else {
        T::one()
    };
    let correction = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), d));
    Ok(v * correction * u.transpose())
}

/// Object model used by the correctness criterion: a vertex cloud and its diameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel<T: Real> {
    vertices: Vec<Vector3<T>>,
    diameter: T,
}

impl<T: Real> ObjectModel<T> {
    /// Validates the vertex set (at least 4 points, not coplanar) and computes the diameter.
    pub fn new(vertices: Vec<Vector3<T>>) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(Error::DegenerateInput(format!(
                "object model needs at least 4 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices
            .iter()
            .any(|v| v.iter().any(|x| !Float::is_finite(*x)))
        {
            return Err(Error::DegenerateInput(
                "object model has non-finite vertices".into(),
            ));
        }
        if is_coplanar(&vertices) {
            return Err(Error::DegenerateInput(
                "object model vertices are coplanar".into(),
            ));
        }
        let mut diameter = T::zero();
        for (i, a) in vertices.iter().enumerate() {
            for b in &vertices[i + 1..] {
                diameter = Float::max(diameter, (a - b).norm());
            }
        }
        Ok(Self { vertices, diameter })
    }

    pub fn vertices(&self) -> &[Vector3<T>] {
        &self.vertices
    }

    pub fn diameter(&self) -> T {
        self.diameter
    }

    pub fn centroid(&self) -> Vector3<T> {
        let n = T::of(self.vertices.len() as f64);
        self.vertices
            .iter()
            .fold(Vector3::zeros(), |acc, v| acc + v)
            / n
    }
}

/// Mean distance between model vertices placed by `estimate` and by `truth`.
pub fn vertex_distance_error<T: Real>(
    estimate: &Pose<T>,
    truth: &Pose<T>,
    model: &ObjectModel<T>,
) -> T {
    // Both placements differ by (ΔR)v + Δt, so avoid transforming twice.
    let d_rot = estimate.rotation - truth.rotation;
    let d_trans = estimate.translation - truth.translation;
    let total = model
        .vertices
        .iter()
        .fold(T::zero(), |acc, v| acc + (d_rot * v + d_trans).norm());
    total / T::of(model.vertices.len() as f64)
}

/// Correct iff the vertex distance error is strictly below `threshold_fraction · diameter`.
pub fn is_pose_correct<T: Real>(
    estimate: &Pose<T>,
    truth: &Pose<T>,
    model: &ObjectModel<T>,
    threshold_fraction: T,
) -> bool {
    vertex_distance_error(estimate, truth, model) < threshold_fraction * model.diameter
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tetra() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]
    }

    fn correspondences(pose: &Pose<f64>, points: &[Vector3<f64>]) -> Vec<Correspondence<f64>> {
        points
            .iter()
            .map(|p| Correspondence::new(*p, pose.apply(p)))
            .collect()
    }

    #[test]
    fn kabsch_identity() {
        let pose = kabsch(&correspondences(&Pose::identity(), &tetra())).unwrap();
        assert!(pose.rotation_angle_to(&Pose::identity()) < 1e-12);
        assert!(pose.translation.norm() < 1e-12);
    }

    #[test]
    fn kabsch_quarter_turn_about_z() {
        let truth = Pose::new(
            Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let pose = kabsch(&correspondences(&truth, &tetra())).unwrap();
        for (a, b) in pose.rotation.iter().zip(truth.rotation.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        for (a, b) in pose.translation.iter().zip(truth.translation.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn kabsch_rejects_too_few_and_collinear() {
        let pts = tetra();
        let few = correspondences(&Pose::identity(), &pts[..2]);
        assert!(matches!(kabsch(&few), Err(Error::DegenerateInput(_))));
        let line: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, -(i as f64)))
            .collect();
        assert!(matches!(
            kabsch(&correspondences(&Pose::identity(), &line)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn kabsch_three_points_is_enough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = Pose::random(&mut rng, Vector3::repeat(-1.0), Vector3::repeat(1.0));
        let pose = kabsch(&correspondences(&truth, &tetra()[1..])).unwrap();
        assert!(pose.rotation_angle_to(&truth) < 1e-9);
    }

    #[test]
    fn kabsch_output_is_proper_for_mirrored_targets() {
        // Camera points are a reflection of the object points; the best proper
        // rotation must still come out with det +1.
        let pts = tetra();
        let pairs: Vec<_> = pts
            .iter()
            .map(|p| Correspondence::new(*p, Vector3::new(-p.x, p.y, p.z)))
            .collect();
        let pose = kabsch(&pairs).unwrap();
        assert!(pose.orthonormality_error() < 1e-9);
        assert!(pose.rotation.determinant() > 0.0);
    }

    #[test]
    fn apply_basics() {
        let p = Vector3::new(0.3, -2.0, 5.0);
        assert_eq!(Pose::<f64>::identity().apply(&p), p);
        let pose = Pose::from_axis_angle(
            Vector3::new(1.0, 1.0, 0.0),
            0.7,
            Vector3::new(1.0, 2.0, 3.0),
        );
        assert_eq!(pose.apply(&Vector3::zeros()), pose.translation);
    }

    #[test]
    fn compose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = Pose::random(&mut rng, Vector3::repeat(-2.0), Vector3::repeat(2.0));
            let b = Pose::random(&mut rng, Vector3::repeat(-2.0), Vector3::repeat(2.0));
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                0.5,
                rng.random_range(-1.0..1.0),
            );
            let lhs = b.apply(&a.apply(&p));
            let rhs = b.compose(&a).apply(&p);
            assert!((lhs - rhs).norm() < 1e-12);
            assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-12);
        }
    }

    #[test]
    fn orthonormalize_repairs_drift() {
        let mut pose = Pose::from_axis_angle(Vector3::z(), 0.3, Vector3::zeros());
        pose.rotation[(0, 1)] += 1e-4;
        assert!(pose.orthonormality_error() > 1e-5);
        let fixed = pose.orthonormalized();
        assert!(fixed.orthonormality_error() < 1e-12);
    }

    #[test]
    fn rotation_angle_matches_construction() {
        for &angle in &[1e-9, 1e-4, 0.5, 2.0, PI - 1e-6] {
            let a = Pose::from_axis_angle(Vector3::new(0.2, -1.0, 0.4), angle, Vector3::zeros());
            assert_abs_diff_eq!(
                a.rotation_angle_to(&Pose::identity()),
                angle,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn vertex_error_cases() {
        let model = ObjectModel::new(tetra()).unwrap();
        let truth = Pose::from_axis_angle(Vector3::y(), 0.4, Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(vertex_distance_error(&truth, &truth, &model), 0.0);

        let d = 0.37;
        let shifted = Pose::new(
            truth.rotation,
            truth.translation + Vector3::new(d, 0.0, 0.0),
        );
        assert_abs_diff_eq!(
            vertex_distance_error(&shifted, &truth, &model),
            d,
            epsilon = 1e-12
        );
    }

    #[test]
    fn vertex_error_half_turn_on_symmetric_model() {
        // Square of side 2 centred at the origin plus apex, rotated 180° about z through the centroid.
        let verts = vec![
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(-1.0, 1.0, 0.0),
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, 2.0),
        ];
        let model = ObjectModel::new(verts.clone()).unwrap();
        let c = model.centroid();
        let half = Pose::from_axis_angle(Vector3::z(), PI, Vector3::zeros());
        // Rotation about the axis through the centroid: v -> R(v - c) + c.
        let about_centroid = Pose::new(half.rotation, c - half.rotation * c);
        // Direct evaluation: each base vertex maps to its diagonal opposite (distance 2√2), apex stays.
        let expected = (4.0 * 2.0 * 2f64.sqrt()) / 5.0;
        let got = vertex_distance_error(&about_centroid, &Pose::identity(), &model);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        let brute: f64 = verts
            .iter()
            .map(|v| (about_centroid.apply(v) - v).norm())
            .sum::<f64>()
            / 5.0;
        assert_abs_diff_eq!(got, brute, epsilon = 1e-12);
    }

    #[test]
    fn correctness_threshold() {
        let model = ObjectModel::new(tetra()).unwrap();
        let diameter = model.diameter();
        assert_abs_diff_eq!(diameter, 2f64.sqrt(), epsilon = 1e-15);
        let truth = Pose::identity();
        assert!(is_pose_correct(&truth, &truth, &model, 0.1));
        let off = |d: f64| Pose::from_translation(Vector3::new(d, 0.0, 0.0));
        assert!(!is_pose_correct(&off(0.2 * diameter), &truth, &model, 0.1));
        assert!(is_pose_correct(
            &off(0.1 * diameter - 1e-9),
            &truth,
            &model,
            0.1
        ));
        assert!(!is_pose_correct(
            &off(0.1 * diameter + 1e-9),
            &truth,
            &model,
            0.1
        ));
    }

    #[test]
    fn model_validation() {
        assert!(ObjectModel::new(tetra()[..3].to_vec()).is_err());
        let flat = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ];
        assert!(ObjectModel::new(flat).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let pts: Vec<Vector3<f32>> = tetra().iter().map(|v| v.cast::<f32>()).collect();
        let truth = Pose::<f32>::from_axis_angle(
            Vector3::new(0.0, 1.0, 1.0),
            1.1,
            Vector3::new(0.5, 0.0, -1.0),
        );
        let pairs: Vec<_> = pts
            .iter()
            .map(|p| Correspondence::new(*p, truth.apply(p)))
            .collect();
        let pose = kabsch(&pairs).unwrap();
        assert!(pose.rotation_angle_to(&truth) < 1e-3);
        assert!(pose.translation_distance(&truth) < 1e-4);
    }

    #[test]
    fn pose_array_round_trip() {
        let pose = Pose::from_axis_angle(
            Vector3::new(0.3, 0.1, 1.0),
            2.2,
            Vector3::new(1.0, -4.0, 0.25),
        );
        assert_eq!(Pose::<f64>::from_array(&pose.to_array()), pose);
    }
}
