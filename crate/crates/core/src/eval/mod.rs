//! Benchmark harness: matched-budget comparison of decision procedures and
//! the gradient-variance experiment.

mod methods;
mod variance;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use methods::{
    bestref, fixed_schedule, pose_agent, randref, run_bestref, run_fixed_schedule_baseline,
    run_randref, uniform, Method, Outcome,
};
pub use variance::{
    variance_benchmark, write_plot_data, VarianceConfig, VarianceReport, VarianceRow,
    VARIANCE_FORMAT_VERSION,
};

use crate::agent::{AgentSettings, EpisodeParams};
use crate::energymodel::{OracleScorer, ScoreInput, Scorer};
use crate::error::{Error, Result};
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::seeds::{self, Stream};
use crate::train::PrecomputedStates;
use crate::EnergyNet;

pub const EVAL_FORMAT_VERSION: u32 = 1;

/// Sharpness of the oracle energies; large enough to act nearly greedily.
pub const ORACLE_SHARPNESS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Runs per scene for stochastic methods.
    pub seeds: u32,
    /// Hypotheses refined by the fixed schedule.
    pub k_top: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::TABLE.to_vec(),
            seeds: 5,
            k_top: 25,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("eval seeds must be at least 1".into()));
        }
        if self.k_top == 0 {
            return Err(Error::Config("k_top must be at least 1".into()));
        }
        Ok(())
    }
}

/// Precomputed states of one evaluation scene, scored by the net and, if
/// requested, by the oracle.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: u64,
    pub net_table: PrecomputedStates,
    pub oracle_table: Option<PrecomputedStates>,
}

/// Builds the tables every method runs on. `settings.episode.tau_max` must be
/// at least 1 so the fixed schedule can refine.
pub fn prepare_scenes(
    scenes: &[(SyntheticScene, HypothesisPool)],
    net: &EnergyNet,
    settings: &AgentSettings,
    with_oracle: bool,
) -> Vec<PreparedScene> {
    let oracle = OracleScorer {
        sharpness: ORACLE_SHARPNESS,
    };
    scenes
        .iter()
        .map(|(scene, pool)| {
            let net_table = PrecomputedStates::build(scene, pool, net, settings);
            let oracle_table = with_oracle.then(|| {
                let mut t = net_table.clone();
                t.rescore_with(|_, _, pose, features| {
                    oracle.score(&ScoreInput {
                        scene,
                        pose,
                        features,
                    })
                });
                t
            });
            PreparedScene {
                scene_id: scene.scene_id,
                net_table,
                oracle_table,
            }
        })
        .collect()
}

/// Runs `method` once on a fresh environment over the scene's tables.
pub fn run_on_tables(
    method: Method,
    scene: &PreparedScene,
    params: &EpisodeParams,
    k_top: usize,
    run: u32,
    master_seed: u64,
) -> Outcome {
    let table = match method {
        Method::Oracle => scene
            .oracle_table
            .as_ref()
            .expect("oracle table was prepared"),
        _ => &scene.net_table,
    };
    let mut env = table.env(params);
    let mut rng = seeds::stream_rng(
        master_seed,
        Stream::Eval,
        &[scene.scene_id, method as u64, run as u64],
    );
    match method {
        Method::PoseAgent | Method::Oracle => pose_agent(&mut env, params, &mut rng),
        Method::FixedSchedule => fixed_schedule(&mut env, k_top, params.m_max),
        Method::RandRef => randref(&mut env, params, &mut rng),
        Method::BestRef => bestref(&mut env, params),
        Method::Uniform => uniform(&mut env, params, &mut rng),
    }
}

/// Per-scene outcome counts of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_id: u64,
    pub method: Method,
    pub runs: u32,
    pub successes: u32,
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Percent of runs ending with a correct pose.
    pub success_rate: f64,
    pub avg_refinement_steps: f64,
    pub episodes: u64,
    pub seeds: u32,
    pub scenes: usize,
}

/// Runs each method on each prepared scene: `seeds` times for stochastic
/// methods, once otherwise.
pub fn evaluate_prepared(
    scenes: &[PreparedScene],
    methods: &[Method],
    params: &EpisodeParams,
    k_top: usize,
    seeds: u32,
    master_seed: u64,
) -> Vec<SceneRow> {
    let per_scene: Vec<Vec<SceneRow>> = scenes
        .par_iter()
        .map(|scene| {
            methods
                .iter()
                .map(|&method| {
                    let runs = if method.is_stochastic() { seeds } else { 1 };
                    let mut row = SceneRow {
                        scene_id: scene.scene_id,
                        method,
                        runs,
                        successes: 0,
                        total_steps: 0,
                    };
                    for run in 0..runs {
                        let out = run_on_tables(method, scene, params, k_top, run, master_seed);
                        row.successes += out.correct as u32;
                        row.total_steps += out.steps_spent as u64;
                    }
                    row
                })
                .collect()
        })
        .collect();
    per_scene.into_iter().flatten().collect()
}

/// Aggregates scene rows per method, in the order of `methods`.
pub fn summarize(rows: &[SceneRow], methods: &[Method], seeds: u32) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&SceneRow> = rows.iter().filter(|r| r.method == method).collect();
            let runs: u64 = mine.iter().map(|r| r.runs as u64).sum();
            let wins: u64 = mine.iter().map(|r| r.successes as u64).sum();
            let steps: u64 = mine.iter().map(|r| r.total_steps).sum();
            let denom = runs.max(1) as f64;
            MethodSummary {
                method,
                success_rate: 100.0 * wins as f64 / denom,
                avg_refinement_steps: steps as f64 / denom,
                episodes: runs,
                seeds: if method.is_stochastic() { seeds } else { 1 },
                scenes: mine.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    /// Budget B⁰ given to the budgeted methods.
    pub budget: u32,
    /// Average steps of the fixed schedule, which set the budget.
    pub fixed_schedule_avg_steps: f64,
    pub k_top: usize,
    pub tau_max: u32,
    pub m_max: u32,
    pub methods: Vec<MethodSummary>,
    pub scenes: Vec<SceneRow>,
}

impl EvalReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// No budgeted method may average more steps than the fixed schedule.
    pub fn check_budget_parity(&self) -> Result<()> {
        for m in self.methods.iter().filter(|m| m.method.is_budgeted()) {
            if m.avg_refinement_steps > self.fixed_schedule_avg_steps {
                return Err(Error::BudgetParity {
                    method: m.method.to_string(),
                    used: m.avg_refinement_steps,
                    reference: self.fixed_schedule_avg_steps,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(text)?;
        if report.format_version != EVAL_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                kind: "eval report",
                found: report.format_version,
                expected: EVAL_FORMAT_VERSION,
            });
        }
        Ok(report)
    }

    /// Writes `<stem>.json`, `<stem>.csv` (one row per method) and
    /// `<stem>_scenes.csv` (one row per scene and method) into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let summary = dir.join(format!("{stem}.csv"));
        write_csv(&summary, &self.methods)?;
        let scenes = dir.join(format!("{stem}_scenes.csv"));
        write_csv(&scenes, &self.scenes)?;
        Ok(vec![json, summary, scenes])
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Matched-budget protocol: run the fixed schedule, set `B⁰` to the floor of
/// its average step count, run the budgeted methods under that budget and
/// check that none of them averaged more steps than the fixed schedule.
pub fn matched_budget_eval(
    scenes: &[(SyntheticScene, HypothesisPool)],
    net: &EnergyNet,
    cfg: &EvalConfig,
    settings: &AgentSettings,
    master_seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    settings.episode.validate()?;
    if settings.episode.tau_max == 0 {
        return Err(Error::Config("evaluation needs tau_max >= 1".into()));
    }
    let mut report = EvalReport {
        format_version: EVAL_FORMAT_VERSION,
        budget: 0,
        fixed_schedule_avg_steps: 0.0,
        k_top: cfg.k_top,
        tau_max: settings.episode.tau_max,
        m_max: settings.episode.m_max,
        methods: Vec::new(),
        scenes: Vec::new(),
    };
    if cfg.methods.is_empty() || scenes.is_empty() {
        return Ok(report);
    }
    let prepared = prepare_scenes(scenes, net, settings, cfg.methods.contains(&Method::Oracle));
    let fixed = evaluate_prepared(
        &prepared,
        &[Method::FixedSchedule],
        &settings.episode,
        cfg.k_top,
        1,
        master_seed,
    );
    let avg = summarize(&fixed, &[Method::FixedSchedule], 1)[0].avg_refinement_steps;
    report.fixed_schedule_avg_steps = avg;
    report.budget = avg.floor() as u32;
    let params = EpisodeParams {
        budget: report.budget,
        ..settings.episode
    };
    let budgeted: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| m.is_budgeted())
        .collect();
    let mut rows = evaluate_prepared(
        &prepared,
        &budgeted,
        &params,
        cfg.k_top,
        cfg.seeds,
        master_seed,
    );
    if cfg.methods.contains(&Method::FixedSchedule) {
        rows.extend(fixed);
    }
    rows.sort_by_key(|r| (r.scene_id, cfg.methods.iter().position(|&m| m == r.method)));
    report.methods = summarize(&rows, &cfg.methods, cfg.seeds);
    report.scenes = rows;
    report.check_budget_parity()?;
    Ok(report)
}

/// Three-sigma binomial margin for the difference of two success rates
/// (fractions in `[0, 1]`) measured on `n` scenes each.
pub fn three_sigma_margin(p_a: f64, p_b: f64, n: usize) -> f64 {
    let n = n as f64;
    3.0 * (p_a * (1.0 - p_a) / n + p_b * (1.0 - p_b) / n).sqrt()
}
