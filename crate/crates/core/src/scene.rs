//! Synthetic scenes standing in for per-pixel object-coordinate predictions,
//! and the three-point hypothesis sampler that seeds the agent's pool.

use std::path::Path;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Beta, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Correspondence};
use crate::seeds::{self, Stream};
use crate::{ObjectModel, Pose, Vec3};

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Consecutive degenerate three-pixel draws tolerated before giving up.
pub const MAX_DEGENERATE_REDRAWS: usize = 100;

/// Where the object model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Seeded random points on an ellipsoid surface.
    Ellipsoid {
        vertex_count: usize,
        semi_axes: [f64; 3],
        seed: u64,
    },
    /// Explicit object-frame vertices.
    Vertices { vertices: Vec<[f64; 3]> },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Ellipsoid {
            vertex_count: 64,
            semi_axes: [0.10, 0.07, 0.05],
            seed: 0x006d_6f64_656c,
        }
    }
}

impl ModelSpec {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn build(&self) -> Result<ObjectModel> {
        match self {
            ModelSpec::Ellipsoid {
                vertex_count,
                semi_axes,
                seed,
            } => {
                if semi_axes.iter().any(|a| !(*a > 0.0)) {
                    return Err(Error::Config("ellipsoid semi-axes must be positive".into()));
                }
                let mut rng = seeds::stream_rng(*seed, Stream::Model, &[]);
                let vertices = (0..*vertex_count)
                    .map(|_| {
                        let dir = loop {
                            let v = Vector3::<f64>::from_fn(|_, _| rng.random_range(-1.0..1.0));
                            let n = v.norm();
                            if n > 1e-3 && n <= 1.0 {
                                break v / n;
                            }
                        };
                        Vector3::new(
                            dir.x * semi_axes[0],
                            dir.y * semi_axes[1],
                            dir.z * semi_axes[2],
                        )
                    })
                    .collect();
                ObjectModel::new(vertices)
            }
            ModelSpec::Vertices { vertices } => ObjectModel::new(
                vertices
                    .iter()
                    .map(|v| Vector3::new(v[0], v[1], v[2]))
                    .collect(),
            ),
        }
    }
}

/// Parameters of the synthetic prediction generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub pixel_count: usize,
    /// Gaussian noise on inlier camera coordinates, as a fraction of the model diameter.
    pub noise_fraction: f64,
    pub outlier_rate: f64,
    /// Beta(α, β) for the object probability of inlier pixels.
    pub inlier_prob_beta: [f64; 2],
    /// Beta(α, β) for the object probability of outlier pixels.
    pub outlier_prob_beta: [f64; 2],
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
    /// Half-width of the cube around the object centre where outlier camera points land, in diameters.
    pub outlier_spread: f64,
    /// Number of wrong poses that structured outliers agree with.
    pub distractor_count: usize,
    /// Fraction of outliers that follow a distractor pose instead of being
    /// scattered. They are predicted as confidently as inliers.
    pub distractor_share: f64,
    pub model: ModelSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            pixel_count: 1000,
            noise_fraction: 0.02,
            outlier_rate: 0.7,
            inlier_prob_beta: [8.0, 2.0],
            outlier_prob_beta: [2.0, 8.0],
            translation_min: [-0.3, -0.3, 0.8],
            translation_max: [0.3, 0.3, 1.5],
            outlier_spread: 1.0,
            distractor_count: 3,
            distractor_share: 1.0,
            model: ModelSpec::default(),
        }
    }
}

impl SceneConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pixel_count < 50 {
            return bad("pixel_count must be at least 50");
        }
        if !(self.noise_fraction >= 0.0) || !self.noise_fraction.is_finite() {
            return bad("noise_fraction must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad("outlier_rate must lie in [0, 1)");
        }
        for b in [self.inlier_prob_beta, self.outlier_prob_beta] {
            if !(b[0] > 0.0 && b[1] > 0.0) {
                return bad("beta parameters must be positive");
            }
        }
        if (0..3).any(|i| !(self.translation_min[i] <= self.translation_max[i])) {
            return bad("translation_min must not exceed translation_max");
        }
        if !(self.outlier_spread > 0.0) {
            return bad("outlier_spread must be positive");
        }
        if !(0.0..=1.0).contains(&self.distractor_share) {
            return bad("distractor_share must lie in [0, 1]");
        }
        if self.distractor_share > 0.0 && self.distractor_count == 0 {
            return bad("distractor_share needs distractor_count >= 1");
        }
        Ok(())
    }
}

/// One pixel's prediction: object probability, predicted object coordinate and observed camera point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPrediction {
    pub object_prob: f64,
    pub object_coord: Vec3,
    pub camera_coord: Vec3,
    /// Generator ground truth; never consulted by the agent.
    pub is_outlier: bool,
}

/// A scene: ground-truth pose, model, and the per-pixel predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene_id: u64,
    pub truth: Pose,
    pub model: ObjectModel,
    pub pixels: Vec<PixelPrediction>,
    pub noise_sigma: f64,
    pub outlier_rate: f64,
    object_coords: Vec<Vec3>,
    camera_coords: Vec<Vec3>,
}

impl SyntheticScene {
    pub fn new(
        scene_id: u64,
        truth: Pose,
        model: ObjectModel,
        pixels: Vec<PixelPrediction>,
        noise_sigma: f64,
        outlier_rate: f64,
    ) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Config("scene has no pixels".into()));
        }
        for p in &pixels {
            if !(0.0..=1.0).contains(&p.object_prob)
                || p.object_coord
                    .iter()
                    .chain(p.camera_coord.iter())
                    .any(|x| !x.is_finite())
            {
                return Err(Error::Config("pixel prediction out of range".into()));
            }
        }
        let object_coords = pixels.iter().map(|p| p.object_coord).collect();
        let camera_coords = pixels.iter().map(|p| p.camera_coord).collect();
        Ok(Self {
            scene_id,
            truth,
            model,
            pixels,
            noise_sigma,
            outlier_rate,
            object_coords,
            camera_coords,
        })
    }

    pub fn object_coords(&self) -> &[Vec3] {
        &self.object_coords
    }

    pub fn camera_coords(&self) -> &[Vec3] {
        &self.camera_coords
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn outlier_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_outlier).count()
    }

    /// A point on the model surface: a vertex blended toward its nearest neighbour.
    fn surface_point<R: Rng + ?Sized>(
        model: &ObjectModel,
        neighbours: &[usize],
        rng: &mut R,
    ) -> Vec3 {
        let verts = model.vertices();
        let i = rng.random_range(0..verts.len());
        let t: f64 = rng.random_range(0.0..1.0);
        verts[i] + (verts[neighbours[i]] - verts[i]) * t
    }
}

fn nearest_neighbours(vertices: &[Vec3]) -> Vec<usize> {
    (0..vertices.len())
        .map(|i| {
            (0..vertices.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (vertices[a] - vertices[i]).norm_squared();
                    let db = (vertices[b] - vertices[i]).norm_squared();
                    da.total_cmp(&db)
                })
                .unwrap_or(i)
        })
        .collect()
}

/// Draws a scene. Identical `(config, scene_id, seed)` give bit-identical scenes.
pub fn generate_scene(config: &SceneConfig, scene_id: u64, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let model = config.model.build()?;
    let diameter = model.diameter();
    let noise_sigma = config.noise_fraction * diameter;
    let neighbours = nearest_neighbours(model.vertices());

    let mut rng = seeds::rng_from(seed);
    let truth = Pose::random(
        &mut rng,
        Vector3::from(config.translation_min),
        Vector3::from(config.translation_max),
    );
    let beta = |b: [f64; 2]| Beta::new(b[0], b[1]).map_err(|e| Error::Config(e.to_string()));
    let inlier_prob = beta(config.inlier_prob_beta)?;
    let outlier_prob = beta(config.outlier_prob_beta)?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let (box_lo, box_hi) = model.vertices().iter().fold(
        (
            Vector3::repeat(f64::INFINITY),
            Vector3::repeat(f64::NEG_INFINITY),
        ),
        |(lo, hi), v| (lo.inf(v), hi.sup(v)),
    );
    let spread = config.outlier_spread * diameter;
    let centre = truth.apply(&model.centroid());
    let distractors: Vec<Pose> = (0..config.distractor_count)
        .map(|_| distractor_pose(&truth, &model, &mut rng))
        .collect();

    let pixels = (0..config.pixel_count)
        .map(|_| {
            if rng.random_bool(config.outlier_rate) {
                if config.distractor_share > 0.0 && rng.random_bool(config.distractor_share) {
                    let pose = &distractors[rng.random_range(0..distractors.len())];
                    let object_coord = SyntheticScene::surface_point(&model, &neighbours, &mut rng);
                    let jitter = Vector3::from_fn(|_, _| noise.sample(&mut rng));
                    return PixelPrediction {
                        object_prob: inlier_prob.sample(&mut rng),
                        object_coord,
                        camera_coord: pose.apply(&object_coord) + jitter,
                        is_outlier: true,
                    };
                }
                let object_coord = Vector3::from_fn(|i, _| rng.random_range(box_lo[i]..=box_hi[i]));
                let camera_coord = Vector3::from_fn(|i, _| {
                    rng.random_range(centre[i] - spread..=centre[i] + spread)
                });
                PixelPrediction {
                    object_prob: outlier_prob.sample(&mut rng),
                    object_coord,
                    camera_coord,
                    is_outlier: true,
                }
            } else {
                let object_coord = SyntheticScene::surface_point(&model, &neighbours, &mut rng);
                let jitter = Vector3::from_fn(|_, _| noise.sample(&mut rng));
                PixelPrediction {
                    object_prob: inlier_prob.sample(&mut rng),
                    object_coord,
                    camera_coord: truth.apply(&object_coord) + jitter,
                    is_outlier: false,
                }
            }
        })
        .collect();

    SyntheticScene::new(
        scene_id,
        truth,
        model,
        pixels,
        noise_sigma,
        config.outlier_rate,
    )
}

/// A wrong pose sharing the object centre with `truth`, rotated at least
/// 60 degrees away from it.
fn distractor_pose<R: Rng + ?Sized>(truth: &Pose, model: &ObjectModel, rng: &mut R) -> Pose {
    let centre = truth.apply(&model.centroid());
    loop {
        let rotation = geometry::random_rotation(rng);
        let candidate = Pose::new(rotation, centre - rotation * model.centroid());
        if candidate.rotation_angle_to(truth) >= std::f64::consts::FRAC_PI_3 {
            return candidate;
        }
    }
}

/// The initial hypothesis pool.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisPool {
    pub hypotheses: Vec<Pose>,
}

impl HypothesisPool {
    pub fn new(hypotheses: Vec<Pose>) -> Self {
        Self { hypotheses }
    }

    pub fn pool_size(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn get(&self, index: usize) -> &Pose {
        &self.hypotheses[index]
    }
}

/// Samples `n` hypotheses, each from three distinct pixels drawn proportionally to
/// their object probability and solved with Kabsch.
pub fn sample_hypothesis_pool(
    scene: &SyntheticScene,
    n: usize,
    seed: u64,
) -> Result<HypothesisPool> {
    if n == 0 {
        return Err(Error::Config("pool size must be at least 1".into()));
    }
    let sampler = PixelSampler::new(scene)?;
    let mut rng = seeds::rng_from(seed);
    let mut hypotheses = Vec::with_capacity(n);
    while hypotheses.len() < n {
        let mut failures = 0;
        let pose = loop {
            let picks = sampler.draw_triple(&mut rng);
            let pairs =
                picks.map(|i| Correspondence::new(scene.object_coords[i], scene.camera_coords[i]));
            match geometry::kabsch(&pairs) {
                Ok(pose) => break pose,
                Err(_) => {
                    failures += 1;
                    if failures >= MAX_DEGENERATE_REDRAWS {
                        return Err(Error::SamplingExhausted { retries: failures });
                    }
                }
            }
        };
        hypotheses.push(pose);
    }
    Ok(HypothesisPool::new(hypotheses))
}

/// Draws pixel indices with probability proportional to their object probability.
pub struct PixelSampler {
    dist: WeightedIndex<f64>,
}

impl PixelSampler {
    pub fn new(scene: &SyntheticScene) -> Result<Self> {
        let weights: Vec<f64> = scene.pixels.iter().map(|p| p.object_prob).collect();
        if weights.iter().filter(|w| **w > 0.0).count() < 3 {
            return Err(Error::Config(
                "need at least 3 pixels with positive object probability".into(),
            ));
        }
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }

    /// Three distinct pixels (sequential draws, repeats rejected).
    pub fn draw_triple<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        let a = self.draw(rng);
        let b = loop {
            let b = self.draw(rng);
            if b != a {
                break b;
            }
        };
        let c = loop {
            let c = self.draw(rng);
            if c != a && c != b {
                break c;
            }
        };
        [a, b, c]
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    vertices: Vec<[f64; 3]>,
    diameter: f64,
}

#[derive(Serialize, Deserialize)]
struct PixelRecord {
    p: f64,
    y: [f64; 3],
    c: [f64; 3],
    outlier: bool,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    scene_id: u64,
    noise_sigma: f64,
    outlier_rate: f64,
    truth: [f64; 12],
    model: ModelFile,
    pixels: Vec<PixelRecord>,
}

impl SyntheticScene {
    pub fn to_json(&self) -> Result<String> {
        let file = SceneFile {
            format_version: SCENE_FORMAT_VERSION,
            scene_id: self.scene_id,
            noise_sigma: self.noise_sigma,
            outlier_rate: self.outlier_rate,
            truth: self.truth.to_array(),
            model: ModelFile {
                vertices: self
                    .model
                    .vertices()
                    .iter()
                    .map(|v| [v.x, v.y, v.z])
                    .collect(),
                diameter: self.model.diameter(),
            },
            pixels: self
                .pixels
                .iter()
                .map(|p| PixelRecord {
                    p: p.object_prob,
                    y: p.object_coord.into(),
                    c: p.camera_coord.into(),
                    outlier: p.is_outlier,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.format_version != SCENE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                kind: "scene",
                found: file.format_version,
                expected: SCENE_FORMAT_VERSION,
            });
        }
        let model = ObjectModel::new(
            file.model
                .vertices
                .iter()
                .map(|v| Vector3::from(*v))
                .collect(),
        )?;
        let pixels = file
            .pixels
            .into_iter()
            .map(|r| PixelPrediction {
                object_prob: r.p,
                object_coord: Vector3::from(r.y),
                camera_coord: Vector3::from(r.c),
                is_outlier: r.outlier,
            })
            .collect();
        Self::new(
            file.scene_id,
            Pose::from_array(&file.truth),
            model,
            pixels,
            file.noise_sigma,
            file.outlier_rate,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::parse(path, j),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vertex_distance_error;

    fn clean_config() -> SceneConfig {
        SceneConfig {
            noise_fraction: 0.0,
            outlier_rate: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn clean_scene_is_exact() {
        let scene = generate_scene(&clean_config(), 0, 42).unwrap();
        for p in &scene.pixels {
            assert!(!p.is_outlier);
            assert_eq!(scene.truth.apply(&p.object_coord), p.camera_coord);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 3, 99).unwrap();
        let b = generate_scene(&cfg, 3, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, generate_scene(&cfg, 3, 100).unwrap());
    }

    #[test]
    fn outlier_count_is_binomial() {
        let cfg = SceneConfig {
            outlier_rate: 0.3,
            ..SceneConfig::default()
        };
        // mean 300, sd sqrt(1000·0.3·0.7) ≈ 14.5; 3σ ≈ 43.
        for seed in 0..20 {
            let count = generate_scene(&cfg, 0, seed).unwrap().outlier_count();
            assert!((260..=340).contains(&count), "seed {seed}: {count}");
        }
    }

    #[test]
    fn inliers_stay_near_truth() {
        let scene = generate_scene(&SceneConfig::default(), 0, 5).unwrap();
        let tol = 4.0 * scene.noise_sigma * 3f64.sqrt();
        let near = scene
            .pixels
            .iter()
            .filter(|p| !p.is_outlier)
            .filter(|p| (scene.truth.apply(&p.object_coord) - p.camera_coord).norm() <= tol)
            .count();
        let inliers = scene.pixels.iter().filter(|p| !p.is_outlier).count();
        assert!(near as f64 >= 0.995 * inliers as f64);
    }

    #[test]
    fn config_validation() {
        let base = SceneConfig::default();
        for cfg in [
            SceneConfig {
                pixel_count: 49,
                ..base.clone()
            },
            SceneConfig {
                noise_fraction: -1.0,
                ..base.clone()
            },
            SceneConfig {
                outlier_rate: 1.0,
                ..base.clone()
            },
        ] {
            assert!(matches!(generate_scene(&cfg, 0, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn clean_pool_is_exact() {
        let scene = generate_scene(&clean_config(), 0, 1).unwrap();
        let pool = sample_hypothesis_pool(&scene, 50, 2).unwrap();
        assert_eq!(pool.pool_size(), 50);
        for h in &pool.hypotheses {
            assert!(vertex_distance_error(h, &scene.truth, &scene.model) < 1e-6);
        }
    }

    #[test]
    fn pool_size_and_determinism() {
        let scene = generate_scene(&SceneConfig::default(), 0, 8).unwrap();
        let a = sample_hypothesis_pool(&scene, 210, 4).unwrap();
        assert_eq!(a.pool_size(), 210);
        assert_eq!(a, sample_hypothesis_pool(&scene, 210, 4).unwrap());
        for h in &a.hypotheses {
            assert!(h.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn sampling_exhausts_on_collinear_predictions() {
        let model = ModelSpec::default().build().unwrap();
        let pixels = (0..60)
            .map(|i| {
                let y = Vector3::new(i as f64 * 0.01, 0.0, 0.0);
                PixelPrediction {
                    object_prob: 0.5,
                    object_coord: y,
                    camera_coord: y,
                    is_outlier: false,
                }
            })
            .collect();
        let scene = SyntheticScene::new(0, Pose::identity(), model, pixels, 0.0, 0.0).unwrap();
        assert!(matches!(
            sample_hypothesis_pool(&scene, 1, 0),
            Err(Error::SamplingExhausted {
                retries: MAX_DEGENERATE_REDRAWS
            })
        ));
    }

    #[test]
    fn json_round_trip() {
        let scene = generate_scene(&SceneConfig::default(), 17, 3).unwrap();
        let back = SyntheticScene::from_json(&scene.to_json().unwrap()).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn rejects_wrong_format_version() {
        let scene = generate_scene(
            &SceneConfig {
                pixel_count: 50,
                ..SceneConfig::default()
            },
            1,
            3,
        )
        .unwrap();
        let text =
            scene
                .to_json()
                .unwrap()
                .replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(
            SyntheticScene::from_json(&text),
            Err(Error::FormatVersion { found: 9, .. })
        ));
    }
}
