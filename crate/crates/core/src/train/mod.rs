//! Policy-gradient training of the energy net.

mod gradient;
mod tables;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use gradient::{
    accumulate_trace, efficient_gradient, episode_seed, estimate_baseline, finalize_gradient,
    naive_reinforce_gradient, sample_and_accumulate, table_success_rate, GradientTables,
    NaiveGradient,
};
pub use tables::{precompute_states, PrecomputedStates, TableEnv};

use crate::agent::{EpisodeParams, FinalRule, RefineRule};
use crate::energymodel::TrainingState;
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};
use crate::EnergyNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// λ⁰.
    pub learning_rate: f64,
    /// ν in λ⁰/(1+lν).
    pub lr_decay: f64,
    pub momentum: f64,
    /// Episodes sampled per gradient estimate (M).
    pub sequences: u64,
    /// Separate episodes used to estimate the reward baseline.
    pub baseline_sequences: u64,
    /// Updates between snapshots.
    pub snapshot_interval: u64,
    pub epochs: u32,
    pub hidden: [usize; 2],
    /// Sampled episodes per validation scene when ranking snapshots.
    pub validation_episodes: u32,
    /// Scenes with more than this fraction of recoverable hypotheses are skipped.
    pub max_recoverable_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 25e-4,
            lr_decay: 0.01,
            momentum: 0.9,
            sequences: 50_000,
            baseline_sequences: 50_000,
            snapshot_interval: 50,
            epochs: 1,
            hidden: [16, 16],
            validation_episodes: 5,
            max_recoverable_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return bad("lr_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.sequences == 0 || self.baseline_sequences == 0 {
            return bad("sequence counts must be at least 1");
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot_interval must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.max_recoverable_fraction) {
            return bad("max_recoverable_fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// λ^l = λ⁰ / (1 + lν).
    pub fn learning_rate_at(&self, update_index: u64) -> f64 {
        self.learning_rate / (1.0 + update_index as f64 * self.lr_decay)
    }
}

/// `v ← μ·v + g`, `θ ← θ + λ·v`. Ascent, since the expected reward is maximized.
pub fn sgd_momentum_step(
    params: &mut [f64],
    gradient: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for len in [gradient.len(), velocity.len()] {
        if len != params.len() {
            return Err(Error::ShapeMismatch {
                expected: params.len(),
                actual: len,
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(gradient).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p += lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoneRecoverable,
    TooEasy,
}

/// Skip rule on the fully refined states: nothing recoverable, or more than
/// `max_fraction` of the pool recoverable.
pub fn skip_reason(pre: &PrecomputedStates, max_fraction: f64) -> Option<SkipReason> {
    let recoverable = pre.recoverable_count();
    if recoverable == 0 {
        Some(SkipReason::NoneRecoverable)
    } else if recoverable as f64 > max_fraction * pre.pool_size() as f64 {
        Some(SkipReason::TooEasy)
    } else {
        None
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: u32,
    pub scene_index: usize,
    pub scene_id: u64,
    pub skipped: bool,
    pub skip_reason: Option<SkipReason>,
    pub update_index: Option<u64>,
    pub baseline: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub learning_rate: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Updates applied before this snapshot was taken.
    pub update_index: u64,
    /// Scene visits completed before this snapshot was taken.
    pub position: u64,
    pub net: EnergyNet,
    pub velocity: Vec<f64>,
    /// Validation success rate in `[0, 1]`, if validation scenes were given.
    pub validation_success: Option<f64>,
}

impl Snapshot {
    pub fn training_state(&self) -> TrainingState {
        TrainingState {
            update_index: self.update_index,
            velocity: self.velocity.clone(),
            position: self.position,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: EnergyNet,
    pub state: TrainingState,
    /// Snapshot with the best validation success (earliest on ties), or the
    /// last one without validation scenes.
    pub selected: Snapshot,
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<TrainLogRow>,
}

/// Writes the training log as CSV with a header row.
pub fn write_log_csv<W: std::io::Write>(rows: &[TrainLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

struct Validator<'a> {
    scenes: &'a mut [PrecomputedStates],
    params: EpisodeParams,
    episodes: u32,
    seed: u64,
}

impl Validator<'_> {
    fn score(&mut self, net: &EnergyNet) -> Option<f64> {
        if self.scenes.is_empty() {
            return None;
        }
        for pre in self.scenes.iter_mut() {
            pre.rescore(net);
        }
        Some(table_success_rate(
            self.scenes,
            &self.params,
            RefineRule::Softmax,
            FinalRule::Softmax,
            self.episodes,
            self.seed,
        ))
    }
}

/// Runs the update loop over `train`: skip rule, baseline, efficient gradient
/// and one momentum ascent step per eligible scene. Snapshots are taken
/// before the first update, every `snapshot_interval` updates and at the end;
/// each is passed to `on_snapshot` as it is taken.
#[allow(clippy::too_many_arguments)]
pub fn training_loop(
    train: &mut [PrecomputedStates],
    validation: &mut [PrecomputedStates],
    params: &EpisodeParams,
    cfg: &TrainConfig,
    mut net: EnergyNet,
    resume: Option<TrainingState>,
    master_seed: u64,
    mut on_snapshot: impl FnMut(&Snapshot) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    let (mut update_index, mut velocity, resume_at) = match resume {
        Some(s) => (s.update_index, s.velocity, s.position),
        None => (0, vec![0.0; net.param_count()], 0),
    };
    let mut position = 0u64;
    if velocity.len() != net.param_count() {
        return Err(Error::ShapeMismatch {
            expected: net.param_count(),
            actual: velocity.len(),
        });
    }
    let mut validator = Validator {
        scenes: validation,
        params: *params,
        episodes: cfg.validation_episodes,
        seed: seeds::derive(master_seed, Stream::Eval, &[]),
    };
    let mut snapshots = Vec::new();
    let mut take = |snapshots: &mut Vec<Snapshot>,
                    net: &EnergyNet,
                    update_index: u64,
                    position: u64,
                    velocity: &[f64],
                    v: &mut Validator<'_>|
     -> Result<()> {
        let snap = Snapshot {
            update_index,
            position,
            net: net.clone(),
            velocity: velocity.to_vec(),
            validation_success: v.score(net),
        };
        log::info!(
            "snapshot at update {update_index}: validation {:?}",
            snap.validation_success
        );
        on_snapshot(&snap)?;
        snapshots.push(snap);
        Ok(())
    };
    take(
        &mut snapshots,
        &net,
        update_index,
        resume_at,
        &velocity,
        &mut validator,
    )?;

    let mut log_rows = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            order.shuffle(&mut seeds::stream_rng(
                master_seed,
                Stream::Shuffle,
                &[epoch as u64],
            ));
        }
        for &i in &order {
            position += 1;
            if position <= resume_at {
                continue;
            }
            let start = Instant::now();
            let pre = &mut train[i];
            let mut row = TrainLogRow {
                epoch,
                scene_index: i,
                scene_id: pre.scene_id(),
                skipped: false,
                skip_reason: skip_reason(pre, cfg.max_recoverable_fraction),
                update_index: None,
                baseline: None,
                gradient_norm: None,
                learning_rate: None,
                wall_time_s: 0.0,
            };
            if row.skip_reason.is_some() {
                row.skipped = true;
                log_rows.push(row);
                continue;
            }
            pre.rescore(&net);
            let baseline = estimate_baseline(
                pre,
                params,
                cfg.baseline_sequences,
                seeds::derive(master_seed, Stream::Baseline, &[update_index]),
            );
            let episodes = seeds::derive(master_seed, Stream::Episode, &[update_index]);
            let grad = efficient_gradient(pre, &net, params, cfg.sequences, baseline, episodes);
            let lr = cfg.learning_rate_at(update_index);
            sgd_momentum_step(net.params_mut(), &grad, &mut velocity, lr, cfg.momentum)?;
            row.update_index = Some(update_index);
            row.baseline = Some(baseline);
            row.gradient_norm = Some(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
            row.learning_rate = Some(lr);
            row.wall_time_s = start.elapsed().as_secs_f64();
            log_rows.push(row);
            update_index += 1;
            if update_index % cfg.snapshot_interval == 0 {
                take(
                    &mut snapshots,
                    &net,
                    update_index,
                    position,
                    &velocity,
                    &mut validator,
                )?;
            }
        }
    }
    if snapshots
        .last()
        .is_none_or(|s| s.update_index != update_index)
    {
        take(
            &mut snapshots,
            &net,
            update_index,
            position.max(resume_at),
            &velocity,
            &mut validator,
        )?;
    }

    let mut best = snapshots.len() - 1;
    if snapshots[0].validation_success.is_some() {
        for (k, s) in snapshots.iter().enumerate() {
            if s.validation_success > snapshots[best].validation_success
                || (s.validation_success == snapshots[best].validation_success && k < best)
            {
                best = k;
            }
        }
    }
    Ok(TrainOutcome {
        net,
        state: TrainingState {
            update_index,
            velocity,
            position: position.max(resume_at),
        },
        selected: snapshots[best].clone(),
        snapshots,
        log: log_rows,
    })
}
