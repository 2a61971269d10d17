//! Policy-gradient estimators.
//!
//! The naive estimator differentiates the network along every visited state
//! of every sampled episode. The efficient one samples episodes on the
//! precomputed tables, collects per-state energy derivatives into `D` tables
//! and backpropagates each state once at the end.

use rayon::prelude::*;

use crate::agent::{
    simulate, AgentSettings, DecisionObserver, EpisodeParams, EpisodePool, EpisodeTrace, FinalRule,
    Phase, RefineRule,
};
use crate::energymodel::Activations;
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::seeds::{self, Stream};
use crate::train::{PrecomputedStates, TableEnv};
use crate::EnergyNet;

/// Episodes per parallel work unit. Fixed so that results do not depend on
/// the number of worker threads.
const CHUNK: u64 = 256;

/// Summed energy derivatives per precomputed state.
///
/// `d` collects refinement-energy terms and `d_prime` final-energy terms,
/// both indexed like [`PrecomputedStates::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTables {
    pub d: Vec<f64>,
    pub d_prime: Vec<f64>,
    pub g: Vec<f64>,
    pub sequences_used: u64,
}

impl GradientTables {
    pub fn zeros(pre: &PrecomputedStates) -> Self {
        Self {
            d: vec![0.0; pre.state_count()],
            d_prime: vec![0.0; pre.state_count()],
            g: Vec::new(),
            sequences_used: 0,
        }
    }

    fn merge(&mut self, other: &GradientTables) {
        self.d.iter_mut().zip(&other.d).for_each(|(x, y)| *x += y);
        self.d_prime
            .iter_mut()
            .zip(&other.d_prime)
            .for_each(|(x, y)| *x += y);
        self.sequences_used += other.sequences_used;
    }
}

/// Seed of episode `k` under `master`. The naive and efficient estimators
/// use the same seeds, so equal masters give equal episodes.
pub fn episode_seed(master: u64, k: u64) -> u64 {
    seeds::derive(master, Stream::Episode, &[k])
}

/// Buffers `(state index, ∂ln π/∂E)` pairs until the reward is known.
#[derive(Default)]
struct Accumulator {
    refine: Vec<(usize, f64)>,
    fin: Vec<(usize, f64)>,
}

impl Accumulator {
    fn clear(&mut self) {
        self.refine.clear();
        self.fin.clear();
    }

    fn flush(&self, scale: f64, tables: &mut GradientTables) {
        if scale == 0.0 {
            return;
        }
        for &(i, g) in &self.refine {
            tables.d[i] += scale * g;
        }
        for &(i, g) in &self.fin {
            tables.d_prime[i] += scale * g;
        }
    }

    fn record(
        &mut self,
        pre: &PrecomputedStates,
        taus: &[u32],
        phase: Phase,
        actions: &[usize],
        pi: &[f64],
        chosen: usize,
    ) {
        let out = match phase {
            Phase::Refinement => &mut self.refine,
            Phase::Final => &mut self.fin,
        };
        for (i, (&a, &p)) in actions.iter().zip(pi).enumerate() {
            let g = if i == chosen { 1.0 - p } else { -p };
            out.push((pre.index(a, taus[a]), g));
        }
    }
}

impl DecisionObserver<TableEnv<'_>> for Accumulator {
    fn decision(
        &mut self,
        env: &TableEnv<'_>,
        phase: Phase,
        actions: &[usize],
        pi: &[f64],
        chosen: usize,
    ) {
        self.record(env.table(), env.taus(), phase, actions, pi, chosen);
    }
}

fn chunks(m: u64) -> Vec<(u64, u64)> {
    (0..m.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(m)))
        .collect()
}

/// Samples `m` episodes on the tables and accumulates
/// `(r_k − baseline)·∂ln π(a^t|s^t)/∂E_a` into `D`/`D′` at each state's current τ.
pub fn sample_and_accumulate(
    pre: &PrecomputedStates,
    params: &EpisodeParams,
    m: u64,
    baseline: f64,
    master_seed: u64,
) -> GradientTables {
    let partial: Vec<GradientTables> = chunks(m)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut tables = GradientTables::zeros(pre);
            let mut env = pre.env(params);
            let mut acc = Accumulator::default();
            for k in lo..hi {
                env.reset();
                acc.clear();
                let mut rng = seeds::rng_from(episode_seed(master_seed, k));
                let trace = simulate(
                    &mut env,
                    params,
                    RefineRule::Softmax,
                    FinalRule::Softmax,
                    &mut rng,
                    &mut acc,
                );
                acc.flush(trace.reward - baseline, &mut tables);
            }
            tables.sequences_used = hi - lo;
            tables
        })
        .collect();
    let mut total = GradientTables::zeros(pre);
    for p in &partial {
        total.merge(p);
    }
    total
}

/// Replays a recorded episode on the tables and adds its terms to `tables`.
///
/// The trace must come from the same scene, pool and energies.
pub fn accumulate_trace(
    pre: &PrecomputedStates,
    params: &EpisodeParams,
    trace: &EpisodeTrace,
    baseline: f64,
    tables: &mut GradientTables,
) {
    let n = pre.pool_size();
    let mut taus = vec![0u32; n];
    let mut acc = Accumulator::default();
    let mut actions = Vec::with_capacity(n);
    let mut energies = Vec::with_capacity(n);
    for rec in &trace.actions {
        actions.clear();
        actions.extend((0..n).filter(|&a| taus[a] < params.tau_max));
        energies.clear();
        energies.extend(actions.iter().map(|&a| pre.energies(a, taus[a]).0));
        let pi = crate::agent::policy_distribution(&energies).expect("recorded step has actions");
        let chosen = actions
            .iter()
            .position(|&a| a == rec.action)
            .expect("recorded action is selectable");
        acc.record(pre, &taus, Phase::Refinement, &actions, &pi, chosen);
        taus[rec.action] += 1;
    }
    actions.clear();
    actions.extend(0..n);
    energies.clear();
    energies.extend((0..n).map(|a| pre.energies(a, taus[a]).1));
    let pi = crate::agent::policy_distribution(&energies).expect("pool is non-empty");
    acc.record(pre, &taus, Phase::Final, &actions, &pi, trace.final_action);
    acc.flush(trace.reward - baseline, tables);
    tables.sequences_used += 1;
}

/// Backpropagates `D/M` and `D′/M` through every state with a non-zero entry.
pub fn finalize_gradient(
    pre: &PrecomputedStates,
    tables: &GradientTables,
    net: &EnergyNet,
) -> Vec<f64> {
    let mut grad = vec![0.0; net.param_count()];
    if tables.sequences_used == 0 {
        return grad;
    }
    let inv_m = 1.0 / tables.sequences_used as f64;
    let mut acts = Activations::default();
    for (i, f) in pre.all_features().iter().enumerate() {
        let upstream = (tables.d[i] * inv_m, tables.d_prime[i] * inv_m);
        if upstream == (0.0, 0.0) {
            continue;
        }
        let x = f.to_array();
        net.forward_cached(&x, &mut acts);
        net.backward_accumulate(&x, &acts, upstream, &mut grad);
    }
    grad
}

/// Sampling phase followed by the gradient phase, on energies already in `pre`.
pub fn efficient_gradient(
    pre: &PrecomputedStates,
    net: &EnergyNet,
    params: &EpisodeParams,
    m: u64,
    baseline: f64,
    master_seed: u64,
) -> Vec<f64> {
    let tables = sample_and_accumulate(pre, params, m, baseline, master_seed);
    finalize_gradient(pre, &tables, net)
}

/// Sums `Σ_t ∇θ ln π(a^t|s^t)` over one live episode.
struct ScoreFunction<'n> {
    net: &'n EnergyNet,
    grad: Vec<f64>,
    acts: Activations<f64>,
}

impl DecisionObserver<EpisodePool<'_, EnergyNet>> for ScoreFunction<'_> {
    fn decision(
        &mut self,
        env: &EpisodePool<'_, EnergyNet>,
        phase: Phase,
        actions: &[usize],
        pi: &[f64],
        chosen: usize,
    ) {
        for (i, (&a, &p)) in actions.iter().zip(pi).enumerate() {
            let g = if i == chosen { 1.0 - p } else { -p };
            let upstream = match phase {
                Phase::Refinement => (g, 0.0),
                Phase::Final => (0.0, g),
            };
            let x = env.states[a].features.to_array();
            self.net.forward_cached(&x, &mut self.acts);
            self.net
                .backward_accumulate(&x, &self.acts, upstream, &mut self.grad);
        }
    }
}

#[derive(Clone, Debug)]
pub struct NaiveGradient {
    pub gradient: Vec<f64>,
    pub traces: Vec<EpisodeTrace>,
}

/// Plain REINFORCE: `m` live episodes, each refining and scoring on demand and
/// backpropagating every visited state.
pub fn naive_reinforce_gradient(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    net: &EnergyNet,
    settings: &AgentSettings,
    m: u64,
    baseline: f64,
    master_seed: u64,
) -> NaiveGradient {
    let params = settings.episode;
    let mut gradient = vec![0.0; net.param_count()];
    let mut traces = Vec::with_capacity(m as usize);
    let mut obs = ScoreFunction {
        net,
        grad: vec![0.0; net.param_count()],
        acts: Activations::default(),
    };
    for k in 0..m {
        obs.grad.iter_mut().for_each(|g| *g = 0.0);
        let mut live = EpisodePool::new(scene, pool, net, settings);
        let mut rng = seeds::rng_from(episode_seed(master_seed, k));
        let trace = simulate(
            &mut live,
            &params,
            RefineRule::Softmax,
            FinalRule::Softmax,
            &mut rng,
            &mut obs,
        );
        let scale = (trace.reward - baseline) / m as f64;
        gradient
            .iter_mut()
            .zip(&obs.grad)
            .for_each(|(g, s)| *g += scale * s);
        traces.push(trace);
    }
    NaiveGradient { gradient, traces }
}

/// Mean reward of `m` episodes sampled on the tables from the current policy.
pub fn estimate_baseline(
    pre: &PrecomputedStates,
    params: &EpisodeParams,
    m: u64,
    seed: u64,
) -> f64 {
    assert!(m >= 1, "baseline needs at least one episode");
    let sums: Vec<f64> = chunks(m)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut env = pre.env(params);
            let mut sum = 0.0;
            for k in lo..hi {
                env.reset();
                let mut rng = seeds::stream_rng(seed, Stream::Baseline, &[k]);
                sum += simulate(
                    &mut env,
                    params,
                    RefineRule::Softmax,
                    FinalRule::Softmax,
                    &mut rng,
                    &mut (),
                )
                .reward;
            }
            sum
        })
        .collect();
    sums.iter().sum::<f64>() / m as f64
}

/// Fraction of `seeds` sampled episodes per table that end with a correct pose.
pub fn table_success_rate(
    tables: &[PrecomputedStates],
    params: &EpisodeParams,
    refine_rule: RefineRule,
    final_rule: FinalRule,
    episodes_per_scene: u32,
    seed: u64,
) -> f64 {
    if tables.is_empty() || episodes_per_scene == 0 {
        return 0.0;
    }
    let wins: u64 = tables
        .par_iter()
        .map(|pre| {
            let mut env = pre.env(params);
            (0..episodes_per_scene)
                .filter(|&k| {
                    env.reset();
                    let mut rng =
                        seeds::stream_rng(seed, Stream::Eval, &[pre.scene_id(), k as u64]);
                    simulate(&mut env, params, refine_rule, final_rule, &mut rng, &mut ()).reward
                        > 0.0
                })
                .count() as u64
        })
        .sum();
    wins as f64 / (tables.len() as u64 * episodes_per_scene as u64) as f64
}

#[cfg(test)]
fn decision_sums(pre: &PrecomputedStates, params: &EpisodeParams, seed: u64) -> Vec<f64> {
    let mut env = pre.env(params);
    let mut acc = Accumulator::default();
    let mut rng = seeds::rng_from(seed);
    simulate(
        &mut env,
        params,
        RefineRule::Softmax,
        FinalRule::Softmax,
        &mut rng,
        &mut acc,
    );
    vec![
        acc.refine.iter().map(|e| e.1).sum(),
        acc.fin.iter().map(|e| e.1).sum(),
    ]
}
