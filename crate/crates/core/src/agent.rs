//! The pose agent: softmax policy over hypothesis energies, budget
//! bookkeeping, and the two-phase episode (refinement, then final decision).
//!
//! Episode dynamics live in [`simulate`], which is generic over an
//! [`EpisodeEnv`]. The live environment [`EpisodePool`] refines poses and
//! queries the scorer on demand; the training code plugs in a table of
//! precomputed states instead. Both therefore follow identical rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energymodel::{featurize, FeatureContext, FeatureVector, ScoreInput, Scorer};
use crate::error::{Error, Result};
use crate::geometry::{is_pose_correct, DEFAULT_THRESHOLD_FRACTION};
use crate::refine::{refine, RefinementResult};
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::seeds;
use crate::Pose;

/// Softmax over `energies`, with the maximum subtracted before exponentiating.
pub fn policy_distribution(energies: &[f64]) -> Result<Vec<f64>> {
    let mut pi = Vec::with_capacity(energies.len());
    policy_distribution_into(energies, &mut pi)?;
    Ok(pi)
}

/// [`policy_distribution`] into a reused buffer.
pub fn policy_distribution_into(energies: &[f64], pi: &mut Vec<f64>) -> Result<()> {
    if energies.is_empty() {
        return Err(Error::EmptyActionSet);
    }
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    pi.clear();
    pi.extend(energies.iter().map(|e| (e - max).exp()));
    let sum: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= sum);
    Ok(())
}

/// `∂ ln π(chosen) / ∂E_a` for every `a` in the action set: `1 − π(a)` for the
/// chosen action, `−π(a)` otherwise.
pub fn log_policy_gradient_wrt_energies(pi: &[f64], chosen: usize) -> Vec<f64> {
    pi.iter()
        .enumerate()
        .map(|(a, p)| if a == chosen { 1.0 - p } else { -p })
        .collect()
}

/// Inverse-CDF draw from `pi` with a uniform `u ∈ [0, 1)`.
pub fn sample_index(pi: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave the cumulative sum a hair below 1.
    pi.iter().rposition(|p| *p > 0.0).unwrap_or(pi.len() - 1)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Budget and per-hypothesis refinement caps of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeParams {
    /// Total refinement steps available (B⁰).
    pub budget: u32,
    /// Times one hypothesis may be chosen for refinement.
    pub tau_max: u32,
    /// Inner-step cap per refinement call.
    pub m_max: u32,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            budget: 77,
            tau_max: 3,
            m_max: 10,
        }
    }
}

impl EpisodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_max == 0 {
            return Err(Error::Config("m_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// How refinement actions are picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineRule {
    /// Softmax over the refinement energies `E`.
    Softmax,
    /// Uniform over the action set.
    Uniform,
}

/// How the final hypothesis is picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalRule {
    /// Softmax over the final energies `E′`.
    Softmax,
    /// Highest `E′`, lowest index on ties.
    Greedy,
    /// Uniform over the whole pool.
    Uniform,
}

/// Which phase a decision belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Refinement,
    Final,
}

/// What an episode needs from its surroundings: current energies, refinement
/// with its step cost, and the correctness of each hypothesis.
pub trait EpisodeEnv {
    fn pool_size(&self) -> usize;
    /// Times hypothesis `a` has been refined so far.
    fn tau(&self, a: usize) -> u32;
    /// `(E, E′)` of hypothesis `a` in its current state.
    fn energies(&self, a: usize) -> (f64, f64);
    /// Refines hypothesis `a` once, returning the inner steps consumed.
    fn refine(&mut self, a: usize, m_max: u32) -> u32;
    fn is_correct(&self, a: usize) -> bool;
}

/// Receives every stochastic decision made during [`simulate`].
pub trait DecisionObserver<E: ?Sized> {
    /// `actions` lists the selectable hypotheses, `pi` their probabilities,
    /// `chosen` is a position in `actions`. Called before the environment changes.
    fn decision(&mut self, env: &E, phase: Phase, actions: &[usize], pi: &[f64], chosen: usize);
}

impl<E: ?Sized> DecisionObserver<E> for () {
    fn decision(&mut self, _: &E, _: Phase, _: &[usize], _: &[f64], _: usize) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub t: u32,
    pub action: usize,
    pub tau_before: u32,
    pub steps: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub actions: Vec<ActionRecord>,
    pub final_action: usize,
    pub reward: f64,
    pub total_steps_spent: u32,
}

impl EpisodeTrace {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Runs one episode: refine while `budget_remaining ≥ m_max` and some hypothesis
/// is below `tau_max`, then pick a final hypothesis among all of them.
pub fn simulate<E, R, O>(
    env: &mut E,
    params: &EpisodeParams,
    refine_rule: RefineRule,
    final_rule: FinalRule,
    rng: &mut R,
    observer: &mut O,
) -> EpisodeTrace
where
    E: EpisodeEnv,
    R: Rng + ?Sized,
    O: DecisionObserver<E>,
{
    let n = env.pool_size();
    let mut remaining = params.budget;
    let mut actions = Vec::new();
    let mut records = Vec::new();
    let mut energies = Vec::new();
    let mut pi = Vec::new();
    let mut t = 0;

    while remaining >= params.m_max {
        actions.clear();
        actions.extend((0..n).filter(|&a| env.tau(a) < params.tau_max));
        if actions.is_empty() {
            break;
        }
        match refine_rule {
            RefineRule::Softmax => {
                energies.clear();
                energies.extend(actions.iter().map(|&a| env.energies(a).0));
                policy_distribution_into(&energies, &mut pi).expect("action set is non-empty");
            }
            RefineRule::Uniform => {
                pi.clear();
                pi.resize(actions.len(), 1.0 / actions.len() as f64);
            }
        }
        let chosen = sample_index(&pi, rng.random::<f64>());
        observer.decision(env, Phase::Refinement, &actions, &pi, chosen);
        let a = actions[chosen];
        let tau_before = env.tau(a);
        let steps = env.refine(a, params.m_max).min(params.m_max);
        remaining -= steps;
        records.push(ActionRecord {
            t,
            action: a,
            tau_before,
            steps,
        });
        t += 1;
    }

    actions.clear();
    actions.extend(0..n);
    energies.clear();
    energies.extend(actions.iter().map(|&a| env.energies(a).1));
    let final_action = match final_rule {
        FinalRule::Softmax => {
            policy_distribution_into(&energies, &mut pi).expect("pool is non-empty");
            let chosen = sample_index(&pi, rng.random::<f64>());
            observer.decision(env, Phase::Final, &actions, &pi, chosen);
            chosen
        }
        FinalRule::Greedy => argmax(energies.iter().copied()).expect("pool is non-empty"),
        FinalRule::Uniform => {
            pi.clear();
            pi.resize(n, 1.0 / n as f64);
            let chosen = sample_index(&pi, rng.random::<f64>());
            observer.decision(env, Phase::Final, &actions, &pi, chosen);
            chosen
        }
    };
    let reward = if env.is_correct(final_action) {
        1.0
    } else {
        -1.0
    };
    EpisodeTrace {
        actions: records,
        final_action,
        reward,
        total_steps_spent: params.budget - remaining,
    }
}

/// Settings the live agent needs beyond the episode budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    pub episode: EpisodeParams,
    /// Inlier threshold in multiples of the scene noise sigma.
    pub inlier_threshold_sigmas: f64,
    /// Correctness threshold as a fraction of the model diameter.
    pub threshold_fraction: f64,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            episode: EpisodeParams::default(),
            inlier_threshold_sigmas: 2.5,
            threshold_fraction: DEFAULT_THRESHOLD_FRACTION,
        }
    }
}

impl AgentSettings {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if !(self.inlier_threshold_sigmas.is_finite() && self.inlier_threshold_sigmas > 0.0) {
            return Err(Error::Config(
                "inlier_threshold_sigmas must be positive".into(),
            ));
        }
        if !(self.threshold_fraction.is_finite() && self.threshold_fraction > 0.0) {
            return Err(Error::Config("threshold_fraction must be positive".into()));
        }
        Ok(())
    }

    /// Absolute inlier threshold for `scene`. A floor of 1e-3 diameters keeps
    /// noise-free scenes usable.
    pub fn inlier_threshold(&self, scene: &SyntheticScene) -> f64 {
        self.inlier_threshold_sigmas * scene.noise_sigma.max(1e-3 * scene.model.diameter())
    }
}

/// One pool entry: pose, refinement count, features and cached energies.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisState {
    pub pose: Pose,
    pub tau: u32,
    pub features: FeatureVector,
    pub cached_e: f64,
    pub cached_e_prime: f64,
}

/// Live episode state over a real scene: refinement and scoring happen on demand.
pub struct EpisodePool<'a, S: Scorer + ?Sized> {
    scene: &'a SyntheticScene,
    scorer: &'a S,
    ctx: FeatureContext,
    threshold_fraction: f64,
    pub states: Vec<HypothesisState>,
    pub budget_remaining: u32,
    pub step_index: u32,
    pub params: EpisodeParams,
}

impl<'a, S: Scorer + ?Sized> EpisodePool<'a, S> {
    pub fn new(
        scene: &'a SyntheticScene,
        pool: &HypothesisPool,
        scorer: &'a S,
        settings: &AgentSettings,
    ) -> Self {
        let ctx = FeatureContext::new(
            scene,
            pool,
            settings.inlier_threshold(scene),
            settings.episode.tau_max,
        );
        let states = pool
            .hypotheses
            .iter()
            .enumerate()
            .map(|(a, pose)| {
                let features = featurize(&ctx, scene, a, pose, None, 0);
                let (e, e2) = scorer.score(&ScoreInput {
                    scene,
                    pose,
                    features: &features,
                });
                HypothesisState {
                    pose: *pose,
                    tau: 0,
                    features,
                    cached_e: e,
                    cached_e_prime: e2,
                }
            })
            .collect();
        Self {
            scene,
            scorer,
            ctx,
            threshold_fraction: settings.threshold_fraction,
            states,
            budget_remaining: settings.episode.budget,
            step_index: 0,
            params: settings.episode,
        }
    }

    pub fn scene(&self) -> &SyntheticScene {
        self.scene
    }

    /// Hypotheses still eligible for refinement.
    pub fn action_set(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&a| self.states[a].tau < self.params.tau_max)
            .collect()
    }

    pub fn is_state_correct(&self, state: &HypothesisState) -> bool {
        is_pose_correct(
            &state.pose,
            &self.scene.truth,
            &self.scene.model,
            self.threshold_fraction,
        )
    }

    /// Refines hypothesis `a` in place and rescores only that hypothesis.
    pub fn refine_hypothesis(&mut self, a: usize, m_max: u32) -> RefinementResult {
        let state = &self.states[a];
        let (pose, features, result) =
            advance_hypothesis(self.scene, &self.ctx, a, &state.pose, state.tau, m_max);
        let (e, e2) = self.scorer.score(&ScoreInput {
            scene: self.scene,
            pose: &pose,
            features: &features,
        });
        self.states[a] = HypothesisState {
            pose,
            tau: state.tau + 1,
            features,
            cached_e: e,
            cached_e_prime: e2,
        };
        self.budget_remaining = self.budget_remaining.saturating_sub(result.steps_used);
        self.step_index += 1;
        result
    }
}

/// One refinement of hypothesis `a` from refinement count `tau`: the new pose
/// (re-orthonormalized) and its features. Live episodes and precomputed
/// tables both go through here.
pub fn advance_hypothesis(
    scene: &SyntheticScene,
    ctx: &FeatureContext,
    a: usize,
    pose: &Pose,
    tau: u32,
    m_max: u32,
) -> (Pose, FeatureVector, RefinementResult) {
    let result = refine(scene, pose, m_max, ctx.inlier_threshold);
    let pose = result.refined_pose.orthonormalized();
    let features = featurize(ctx, scene, a, &pose, Some(&result), tau + 1);
    (pose, features, result)
}

impl<S: Scorer + ?Sized> EpisodeEnv for EpisodePool<'_, S> {
    fn pool_size(&self) -> usize {
        self.states.len()
    }

    fn tau(&self, a: usize) -> u32 {
        self.states[a].tau
    }

    fn energies(&self, a: usize) -> (f64, f64) {
        (self.states[a].cached_e, self.states[a].cached_e_prime)
    }

    fn refine(&mut self, a: usize, m_max: u32) -> u32 {
        self.refine_hypothesis(a, m_max).steps_used
    }

    fn is_correct(&self, a: usize) -> bool {
        self.is_state_correct(&self.states[a])
    }
}

/// Runs the sampling policy on a freshly initialized pool.
pub fn run_episode<S: Scorer + ?Sized>(
    pool: &mut EpisodePool<'_, S>,
    rng_seed: u64,
) -> EpisodeTrace {
    let mut rng = seeds::rng_from(rng_seed);
    let params = pool.params;
    simulate(
        pool,
        &params,
        RefineRule::Softmax,
        FinalRule::Softmax,
        &mut rng,
        &mut (),
    )
}

/// Deterministic final choice: highest `E′`, lowest index on ties.
pub fn greedy_final_choice<E: EpisodeEnv + ?Sized>(env: &E) -> usize {
    argmax((0..env.pool_size()).map(|a| env.energies(a).1)).expect("pool is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energymodel::EnergyNet;
    use crate::scene::{generate_scene, sample_hypothesis_pool, SceneConfig};

    #[test]
    fn softmax_cases() {
        let u = policy_distribution(&[0.3; 4]).unwrap();
        assert!(u.iter().all(|p| (p - 0.25).abs() < 1e-15));

        let pi = policy_distribution(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((pi[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((pi[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((pi[0] - 0.7311).abs() < 1e-4);

        let shifted = policy_distribution(&[1.0 + 123.0, 123.0]).unwrap();
        assert!((shifted[0] - pi[0]).abs() < 1e-12 && (shifted[1] - pi[1]).abs() < 1e-12);

        let huge = policy_distribution(&[1000.0, 999.0, -1000.0]).unwrap();
        assert!((huge.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(matches!(
            policy_distribution(&[]),
            Err(Error::EmptyActionSet)
        ));
    }

    #[test]
    fn log_policy_gradient_cases() {
        assert_eq!(
            log_policy_gradient_wrt_energies(&[0.5, 0.5], 0),
            vec![0.5, -0.5]
        );
        let pi = policy_distribution(&[1.0, 0.0]).unwrap();
        let g = log_policy_gradient_wrt_energies(&pi, 1);
        assert!((g[0] + pi[0]).abs() < 1e-15 && (g[1] - pi[0]).abs() < 1e-15);
        assert!((g[0] + 0.7311).abs() < 1e-4);
        let pi = policy_distribution(&[0.2, -1.0, 3.0, 0.7]).unwrap();
        for c in 0..4 {
            assert!(
                log_policy_gradient_wrt_energies(&pi, c)
                    .iter()
                    .sum::<f64>()
                    .abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn sampling_inverts_cdf() {
        let pi = [0.2, 0.5, 0.3];
        assert_eq!(sample_index(&pi, 0.0), 0);
        assert_eq!(sample_index(&pi, 0.19), 0);
        assert_eq!(sample_index(&pi, 0.2), 1);
        assert_eq!(sample_index(&pi, 0.71), 2);
        assert_eq!(sample_index(&pi, 0.999_999_999_999_999_9), 2);
        assert_eq!(sample_index(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax([0.1, 0.9, 0.3]), Some(1));
        assert_eq!(argmax([0.4, 0.4, 0.4]), Some(0));
        assert_eq!(argmax(std::iter::empty()), None);
    }

    fn setup(n: usize) -> (SyntheticScene, HypothesisPool) {
        let scene = generate_scene(&SceneConfig::default(), 0, 12).unwrap();
        let pool = sample_hypothesis_pool(&scene, n, 13).unwrap();
        (scene, pool)
    }

    #[test]
    fn tiny_budget_skips_refinement() {
        let (scene, pool) = setup(8);
        let net = EnergyNet::init([16, 16], 1);
        let settings = AgentSettings {
            episode: EpisodeParams {
                budget: 9,
                tau_max: 3,
                m_max: 10,
            },
            ..AgentSettings::default()
        };
        let mut ep = EpisodePool::new(&scene, &pool, &net, &settings);
        let trace = run_episode(&mut ep, 5);
        assert!(trace.actions.is_empty());
        assert_eq!(trace.total_steps_spent, 0);
        assert!(trace.final_action < 8);
    }

    #[test]
    fn forced_path_single_hypothesis() {
        let (scene, pool) = setup(1);
        let net = EnergyNet::init([16, 16], 1);
        let settings = AgentSettings {
            episode: EpisodeParams {
                budget: 100,
                tau_max: 1,
                m_max: 10,
            },
            ..AgentSettings::default()
        };
        let mut ep = EpisodePool::new(&scene, &pool, &net, &settings);
        let trace = run_episode(&mut ep, 5);
        assert_eq!(trace.actions.len(), 1);
        assert_eq!(trace.actions[0].action, 0);
        assert_eq!(trace.final_action, 0);
    }

    #[test]
    fn episode_is_reproducible_and_budget_safe() {
        let (scene, pool) = setup(20);
        let net = EnergyNet::init([16, 16], 2);
        let settings = AgentSettings::default();
        for seed in 0..10 {
            let mut a = EpisodePool::new(&scene, &pool, &net, &settings);
            let mut b = EpisodePool::new(&scene, &pool, &net, &settings);
            let ta = run_episode(&mut a, seed);
            assert_eq!(ta, run_episode(&mut b, seed));
            let spent: u32 = ta.actions.iter().map(|r| r.steps).sum();
            assert_eq!(spent, ta.total_steps_spent);
            assert!(spent <= settings.episode.budget);
            assert_eq!(a.budget_remaining, settings.episode.budget - spent);
            for s in &a.states {
                assert!(s.tau <= settings.episode.tau_max);
                let (e, e2) = net.forward(&s.features.to_array());
                assert_eq!((e, e2), (s.cached_e, s.cached_e_prime));
            }
        }
    }

    #[test]
    fn greedy_choice_uses_final_energy() {
        let (scene, pool) = setup(5);
        let net = EnergyNet::init([16, 16], 2);
        let mut ep = EpisodePool::new(&scene, &pool, &net, &AgentSettings::default());
        for (i, v) in [0.1, 0.9, 0.3, 0.9, -2.0].iter().enumerate() {
            ep.states[i].cached_e_prime = *v;
        }
        assert_eq!(greedy_final_choice(&ep), 1);
        for s in ep.states.iter_mut() {
            s.cached_e_prime = 0.0;
        }
        assert_eq!(greedy_final_choice(&ep), 0);
    }

    #[test]
    fn trace_serializes_as_json_line() {
        let (scene, pool) = setup(6);
        let net = EnergyNet::init([16, 16], 2);
        let mut ep = EpisodePool::new(&scene, &pool, &net, &AgentSettings::default());
        let trace = run_episode(&mut ep, 1);
        let line = trace.to_json_line().unwrap();
        assert!(!line.contains('\n'));
        let back: EpisodeTrace = serde_json::from_str(&line).unwrap();
        assert_eq!(back, trace);
    }
}
