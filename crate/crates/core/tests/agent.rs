use poseagent::agent::{
    policy_distribution, run_episode, simulate, AgentSettings, EpisodeParams, EpisodePool,
    FinalRule, RefineRule,
};
use poseagent::scene::{generate_scene, sample_hypothesis_pool, SceneConfig};
use poseagent::seeds;
use poseagent::train::PrecomputedStates;
use poseagent::EnergyNet;
use proptest::prelude::*;

#[test]
fn zero_net_picks_uniformly() {
    let scene = generate_scene(&SceneConfig::default(), 0, 1).unwrap();
    let n = 6;
    let pool = sample_hypothesis_pool(&scene, n, 2).unwrap();
    let settings = AgentSettings {
        episode: EpisodeParams {
            budget: 4,
            tau_max: 1,
            m_max: 4,
        },
        ..AgentSettings::default()
    };
    let net = EnergyNet::zeros([4, 4]);
    let pre = PrecomputedStates::build(&scene, &pool, &net, &settings);
    let mut env = pre.env(&settings.episode);
    let mut rng = seeds::rng_from(3);
    let runs = 100_000;
    let mut counts = vec![0u32; n];
    for _ in 0..runs {
        env.reset();
        let trace = simulate(
            &mut env,
            &settings.episode,
            RefineRule::Softmax,
            FinalRule::Softmax,
            &mut rng,
            &mut (),
        );
        counts[trace.actions[0].action] += 1;
    }
    let q = 1.0 / n as f64;
    let sigma = (runs as f64 * q * (1.0 - q)).sqrt();
    for c in counts {
        assert!((c as f64 - runs as f64 * q).abs() <= 3.0 * sigma, "{c}");
    }
}

#[test]
fn live_episode_is_reproducible() {
    let scene = generate_scene(&SceneConfig::default(), 4, 5).unwrap();
    let pool = sample_hypothesis_pool(&scene, 10, 6).unwrap();
    let net = EnergyNet::init([8, 8], 7);
    let settings = AgentSettings::default();
    let run = || run_episode(&mut EpisodePool::new(&scene, &pool, &net, &settings), 11);
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.total_steps_spent <= settings.episode.budget);
}

proptest! {
    #[test]
    fn policy_is_normalized(energies in prop::collection::vec(-700.0..700.0f64, 1..50)) {
        let pi = policy_distribution(&energies).unwrap();
        let sum: f64 = pi.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(pi.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn empty_action_set_is_an_error() {
    assert!(policy_distribution(&[]).is_err());
}
