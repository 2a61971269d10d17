use poseagent::agent::AgentSettings;
use poseagent::energymodel::OracleScorer;
use poseagent::geometry::is_pose_correct;
use poseagent::scene::{generate_scene, sample_hypothesis_pool, PixelSampler, SceneConfig};
use poseagent::seeds;
use poseagent::train::PrecomputedStates;

#[test]
fn pixel_frequencies_follow_object_probability() {
    let cfg = SceneConfig {
        pixel_count: 50,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&cfg, 0, 17).unwrap();
    let sampler = PixelSampler::new(&scene).unwrap();
    let mut rng = seeds::rng_from(18);
    let draws = 100_000;
    let mut counts = vec![0u32; scene.len()];
    for _ in 0..draws {
        counts[sampler.draw(&mut rng)] += 1;
    }
    let total: f64 = scene.pixels.iter().map(|p| p.object_prob).sum();
    let (mut chi2, mut outside) = (0.0, 0);
    for (i, p) in scene.pixels.iter().enumerate() {
        let q = p.object_prob / total;
        let expected = draws as f64 * q;
        let sigma = (expected * (1.0 - q)).sqrt();
        let diff = counts[i] as f64 - expected;
        if diff.abs() > 3.0 * sigma {
            outside += 1;
            eprintln!("pixel {i}: {} draws, expected {expected:.1}", counts[i]);
        }
        chi2 += diff * diff / expected;
    }
    // About 0.14 of 50 pixels leave a 3σ band by chance.
    assert!(outside <= 2, "{outside} pixels outside 3 sigma");
    // 49 degrees of freedom; the 0.999 quantile is 85.4.
    assert!(chi2 < 85.4, "{chi2}");
}

#[test]
fn clean_scene_pool_is_all_correct() {
    let cfg = SceneConfig {
        noise_fraction: 0.0,
        outlier_rate: 0.0,
        ..SceneConfig::default()
    };
    for id in 0..5 {
        let scene = generate_scene(&cfg, id, 40 + id).unwrap();
        let pool = sample_hypothesis_pool(&scene, 30, 50 + id).unwrap();
        assert!(pool.hypotheses.iter().all(|h| is_pose_correct(
            h,
            &scene.truth,
            &scene.model,
            0.1
        )));
    }
}

#[test]
fn most_default_scenes_are_recoverable() {
    let cfg = SceneConfig::default();
    let settings = AgentSettings::default();
    let scorer = OracleScorer { sharpness: 1.0 };
    let recoverable = (0..100)
        .filter(|&id| {
            let scene =
                generate_scene(&cfg, id, seeds::derive(5, seeds::Stream::Scene, &[id])).unwrap();
            let pool = sample_hypothesis_pool(&scene, 210, id).unwrap();
            PrecomputedStates::build(&scene, &pool, &scorer, &settings).recoverable_count() > 0
        })
        .count();
    assert!(recoverable >= 90, "{recoverable} of 100");
}
