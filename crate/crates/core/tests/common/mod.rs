//! Test oracles shared by the integration tests.
#![allow(dead_code)]

use poseagent::agent::{policy_distribution, AgentSettings, EpisodeParams};
use poseagent::geometry::vertex_distance_error;
use poseagent::scene::{
    generate_scene, sample_hypothesis_pool, HypothesisPool, SceneConfig, SyntheticScene,
};
use poseagent::train::PrecomputedStates;
use poseagent::EnergyNet;

/// Exact expected reward and its gradient, by walking every action sequence.
pub struct Enumerated {
    pub expected_reward: f64,
    pub gradient: Vec<f64>,
    pub sequences: usize,
    /// Probability mass of all enumerated sequences; 1 up to rounding.
    pub total_probability: f64,
}

struct Walk<'a> {
    pre: &'a PrecomputedStates,
    params: EpisodeParams,
    /// `Σ P(seq)·r(seq)·∂ln P(seq)/∂E` per state, refinement and final head.
    d: Vec<f64>,
    d_prime: Vec<f64>,
    expected: f64,
    mass: f64,
    sequences: usize,
}

impl Walk<'_> {
    fn step(
        &mut self,
        taus: &mut Vec<u32>,
        remaining: u32,
        prob: f64,
        terms: &mut Vec<(usize, f64)>,
    ) {
        let n = self.pre.pool_size();
        let actions: Vec<usize> = (0..n).filter(|&a| taus[a] < self.params.tau_max).collect();
        if remaining >= self.params.m_max && !actions.is_empty() {
            let energies: Vec<f64> = actions
                .iter()
                .map(|&a| self.pre.energies(a, taus[a]).0)
                .collect();
            let pi = policy_distribution(&energies).unwrap();
            for (c, &a) in actions.iter().enumerate() {
                let mark = terms.len();
                for (i, &b) in actions.iter().enumerate() {
                    let g = if i == c { 1.0 - pi[i] } else { -pi[i] };
                    terms.push((self.pre.index(b, taus[b]), g));
                }
                let steps = self.pre.steps(a, taus[a]).min(self.params.m_max);
                taus[a] += 1;
                self.step(taus, remaining - steps, prob * pi[c], terms);
                taus[a] -= 1;
                terms.truncate(mark);
            }
            return;
        }
        let energies: Vec<f64> = (0..n).map(|a| self.pre.energies(a, taus[a]).1).collect();
        let pi = policy_distribution(&energies).unwrap();
        for c in 0..n {
            let p = prob * pi[c];
            let r = if self.pre.is_correct(c, taus[c]) {
                1.0
            } else {
                -1.0
            };
            self.expected += p * r;
            self.mass += p;
            self.sequences += 1;
            for &(idx, g) in terms.iter() {
                self.d[idx] += p * r * g;
            }
            for b in 0..n {
                let g = if b == c { 1.0 - pi[b] } else { -pi[b] };
                self.d_prime[self.pre.index(b, taus[b])] += p * r * g;
            }
        }
    }
}

/// Enumerates all sequences on `pre`, whose energies must come from `net`.
pub fn enumerate(pre: &PrecomputedStates, params: &EpisodeParams, net: &EnergyNet) -> Enumerated {
    let mut walk = Walk {
        pre,
        params: *params,
        d: vec![0.0; pre.state_count()],
        d_prime: vec![0.0; pre.state_count()],
        expected: 0.0,
        mass: 0.0,
        sequences: 0,
    };
    walk.step(
        &mut vec![0; pre.pool_size()],
        params.budget,
        1.0,
        &mut Vec::new(),
    );
    let mut gradient = vec![0.0; net.param_count()];
    for (i, f) in pre.all_features().iter().enumerate() {
        let g = net.backward(&f.to_array(), (walk.d[i], walk.d_prime[i]));
        gradient.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Enumerated {
        expected_reward: walk.expected,
        gradient,
        sequences: walk.sequences,
        total_probability: walk.mass,
    }
}

/// Exact `E[r]` under `net`'s energies.
pub fn expected_reward(
    pre: &mut PrecomputedStates,
    params: &EpisodeParams,
    net: &EnergyNet,
) -> f64 {
    pre.rescore(net);
    enumerate(pre, params, net).expected_reward
}

/// Central finite differences of the enumerated `E[r]` over every parameter.
pub fn finite_difference_gradient(
    pre: &mut PrecomputedStates,
    params: &EpisodeParams,
    net: &EnergyNet,
    h: f64,
) -> Vec<f64> {
    let mut probe = net.clone();
    let out = (0..net.param_count())
        .map(|j| {
            let base = net.params()[j];
            probe.params_mut()[j] = base + h;
            let up = expected_reward(pre, params, &probe);
            probe.params_mut()[j] = base - h;
            let down = expected_reward(pre, params, &probe);
            probe.params_mut()[j] = base;
            (up - down) / (2.0 * h)
        })
        .collect();
    pre.rescore(net);
    out
}

/// The enumerable instance: N = 3, τ_max = 1, m_max = 1 and a budget of
/// exactly two refinements, so 3·2·3 = 18 sequences. The correctness threshold
/// is placed between the pose errors of the six states so that rewards differ.
pub fn enumerable_instance(
    net: &EnergyNet,
) -> (
    SyntheticScene,
    HypothesisPool,
    AgentSettings,
    PrecomputedStates,
) {
    let scene = generate_scene(&SceneConfig::default(), 0, 11).unwrap();
    let pool = sample_hypothesis_pool(&scene, 3, 12).unwrap();
    let mut settings = AgentSettings {
        episode: EpisodeParams {
            budget: 2,
            tau_max: 1,
            m_max: 1,
        },
        ..AgentSettings::default()
    };
    let pre = PrecomputedStates::build(&scene, &pool, net, &settings);
    let diameter = scene.model.diameter();
    let mut errors: Vec<f64> = (0..3)
        .flat_map(|a| (0..=1).map(move |t| (a, t)))
        .map(|(a, t)| vertex_distance_error(pre.pose(a, t), &scene.truth, &scene.model) / diameter)
        .collect();
    errors.sort_by(f64::total_cmp);
    settings.threshold_fraction = 0.5 * (errors[2] + errors[3]);
    let pre = PrecomputedStates::build(&scene, &pool, net, &settings);
    (scene, pool, settings, pre)
}
