//! Decision procedures compared in the benchmark. Each works on any
//! [`EpisodeEnv`], so it runs the same on live pools and precomputed tables.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    argmax, simulate, AgentSettings, EpisodeEnv, EpisodeParams, EpisodePool, FinalRule, RefineRule,
};
use crate::energymodel::Scorer;
use crate::error::{Error, Result};
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::seeds;
use crate::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Trained agent: softmax refinement and softmax final decision.
    PoseAgent,
    /// Refine the `k_top` best hypotheses by `E′` once each, then take the best.
    FixedSchedule,
    /// Uniform refinement choices, greedy final decision.
    RandRef,
    /// Refine the best hypothesis by `E` until the budget or `τ_max` stops it.
    BestRef,
    /// Uniform refinement and uniform final decision.
    Uniform,
    /// Agent policy on energies derived from the true pose error.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::PoseAgent,
        Method::FixedSchedule,
        Method::RandRef,
        Method::BestRef,
        Method::Uniform,
        Method::Oracle,
    ];

    /// The methods compared in the results table.
    pub const TABLE: [Method; 4] = [
        Method::FixedSchedule,
        Method::PoseAgent,
        Method::RandRef,
        Method::BestRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PoseAgent => "pose-agent",
            Method::FixedSchedule => "fixed-schedule",
            Method::RandRef => "rand-ref",
            Method::BestRef => "best-ref",
            Method::Uniform => "uniform",
            Method::Oracle => "oracle",
        }
    }

    /// Whether the method spends a budget set from the fixed schedule.
    pub fn is_budgeted(self) -> bool {
        self != Method::FixedSchedule
    }

    /// Whether repeated runs can differ.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            Method::PoseAgent | Method::RandRef | Method::Uniform | Method::Oracle
        )
    }

    /// Parses a comma-separated list; `all` expands to the comparison-table methods.
    pub fn parse_list(text: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if part == "all" {
                out.extend(Method::TABLE);
            } else {
                out.push(part.parse()?);
            }
        }
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Result of one run of a decision procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub final_action: usize,
    pub steps_spent: u32,
    pub correct: bool,
}

/// Scores all hypotheses with `E′`, refines the `k_top` best once each and
/// returns the best by `E′` afterwards. Ties go to the lower index.
pub fn fixed_schedule<E: EpisodeEnv + ?Sized>(env: &mut E, k_top: usize, m_max: u32) -> Outcome {
    let n = env.pool_size();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| env.energies(b).1.total_cmp(&env.energies(a).1));
    let mut steps_spent = 0;
    for &a in order.iter().take(k_top.min(n)) {
        steps_spent += env.refine(a, m_max);
    }
    let final_action = argmax((0..n).map(|a| env.energies(a).1)).expect("pool is non-empty");
    Outcome {
        final_action,
        steps_spent,
        correct: env.is_correct(final_action),
    }
}

/// Uniform refinement over the action set, greedy final choice by `E′`.
pub fn randref<E: EpisodeEnv, R: Rng + ?Sized>(
    env: &mut E,
    params: &EpisodeParams,
    rng: &mut R,
) -> Outcome {
    run_rules(env, params, RefineRule::Uniform, FinalRule::Greedy, rng)
}

/// Refines the argmax-`E` hypothesis while budget and `τ_max` allow, then outputs it.
pub fn bestref<E: EpisodeEnv + ?Sized>(env: &mut E, params: &EpisodeParams) -> Outcome {
    let n = env.pool_size();
    let a = argmax((0..n).map(|a| env.energies(a).0)).expect("pool is non-empty");
    let mut remaining = params.budget;
    while remaining >= params.m_max && env.tau(a) < params.tau_max {
        remaining -= env.refine(a, params.m_max).min(params.m_max);
    }
    Outcome {
        final_action: a,
        steps_spent: params.budget - remaining,
        correct: env.is_correct(a),
    }
}

/// The agent's sampling policy in both phases.
pub fn pose_agent<E: EpisodeEnv, R: Rng + ?Sized>(
    env: &mut E,
    params: &EpisodeParams,
    rng: &mut R,
) -> Outcome {
    run_rules(env, params, RefineRule::Softmax, FinalRule::Softmax, rng)
}

/// Uniform choices in both phases.
pub fn uniform<E: EpisodeEnv, R: Rng + ?Sized>(
    env: &mut E,
    params: &EpisodeParams,
    rng: &mut R,
) -> Outcome {
    run_rules(env, params, RefineRule::Uniform, FinalRule::Uniform, rng)
}

fn run_rules<E: EpisodeEnv, R: Rng + ?Sized>(
    env: &mut E,
    params: &EpisodeParams,
    refine_rule: RefineRule,
    final_rule: FinalRule,
    rng: &mut R,
) -> Outcome {
    let trace = simulate(env, params, refine_rule, final_rule, rng, &mut ());
    Outcome {
        final_action: trace.final_action,
        steps_spent: trace.total_steps_spent,
        correct: trace.reward > 0.0,
    }
}

/// Fixed-schedule pipeline on a live pool: the chosen pose and the steps spent.
/// Uses `settings.episode.m_max` as the per-hypothesis step cap.
pub fn run_fixed_schedule_baseline<S: Scorer + ?Sized>(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    scorer: &S,
    settings: &AgentSettings,
    k_top: usize,
) -> (Pose, u32) {
    let mut env = EpisodePool::new(scene, pool, scorer, settings);
    let out = fixed_schedule(&mut env, k_top, settings.episode.m_max);
    (env.states[out.final_action].pose, out.steps_spent)
}

/// RandRef on a live pool.
pub fn run_randref<S: Scorer + ?Sized>(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    scorer: &S,
    settings: &AgentSettings,
    seed: u64,
) -> (Pose, u32) {
    let mut env = EpisodePool::new(scene, pool, scorer, settings);
    let out = randref(&mut env, &settings.episode, &mut seeds::rng_from(seed));
    (env.states[out.final_action].pose, out.steps_spent)
}

/// BestRef on a live pool.
pub fn run_bestref<S: Scorer + ?Sized>(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    scorer: &S,
    settings: &AgentSettings,
) -> (Pose, u32) {
    let mut env = EpisodePool::new(scene, pool, scorer, settings);
    let out = bestref(&mut env, &settings.episode);
    (env.states[out.final_action].pose, out.steps_spent)
}
