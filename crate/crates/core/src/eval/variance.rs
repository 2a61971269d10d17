//! Gradient standard deviation against wall time for both estimators.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::AgentSettings;
use crate::error::{Error, Result};
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::seeds::{self, Stream};
use crate::train::{
    estimate_baseline, finalize_gradient, naive_reinforce_gradient, sample_and_accumulate,
    PrecomputedStates,
};
use crate::EnergyNet;

pub const VARIANCE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceConfig {
    /// Hypotheses in the benchmark scene's pool.
    pub pool_size: usize,
    /// Pixels of the benchmark scene; image scale, so that precomputation
    /// weighs against sampling as it does on real predictions.
    pub pixel_count: usize,
    pub efficient_m: Vec<u64>,
    pub naive_m: Vec<u64>,
    /// Gradient estimates per (estimator, M).
    pub repetitions: u32,
    /// Gradient components whose standard deviation is averaged; all of
    /// them if the net has fewer.
    pub components: usize,
    /// Episodes for the fixed reward baseline shared by all runs.
    pub baseline_sequences: u64,
    /// Worker threads used while timing.
    pub workers: usize,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            pool_size: 21,
            pixel_count: 320 * 240,
            efficient_m: vec![5, 50, 500, 5000, 50_000],
            naive_m: vec![1, 2, 3, 4],
            repetitions: 20,
            components: 1000,
            baseline_sequences: 50_000,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    /// `efficient` or `naive`.
    pub estimator: String,
    pub m: u64,
    pub repetitions: u32,
    /// Mean wall time of one full gradient computation.
    pub mean_time_s: f64,
    /// Efficient estimator only: refinement and scoring of all states.
    pub mean_precompute_s: f64,
    /// Efficient estimator only: episode sampling into the D tables.
    pub mean_sampling_s: f64,
    /// Efficient estimator only: backward passes.
    pub mean_gradient_s: f64,
    /// Standard deviation across repetitions, averaged over the selected components.
    pub gradient_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub format_version: u32,
    pub pool_size: usize,
    pub pixel_count: usize,
    pub param_count: usize,
    pub components: usize,
    pub baseline: f64,
    pub workers: usize,
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    pub fn row(&self, estimator: &str, m: u64) -> Option<&VarianceRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.m == m)
    }

    /// Writes `<stem>.json`, `<stem>.csv` and the `(M, time, std)` plot file.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        super::write_csv(&csv, &self.rows)?;
        let plot = dir.join(format!("{stem}_plot.dat"));
        write_plot_data(self, &plot)?;
        Ok(vec![json, csv, plot])
    }
}

/// Whitespace-separated `estimator M time_s std` lines with a `#` header.
pub fn write_plot_data(report: &VarianceReport, path: &Path) -> Result<()> {
    let mut text = String::from("# estimator m time_s std\n");
    for r in &report.rows {
        text.push_str(&format!(
            "{} {} {:.9} {:.9e}\n",
            r.estimator, r.m, r.mean_time_s, r.gradient_std
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean over `components` of the sample standard deviation across `grads`.
fn mean_component_std(grads: &[Vec<f64>], components: &[usize]) -> f64 {
    let n = grads.len() as f64;
    let stds: Vec<f64> = components
        .iter()
        .map(|&j| {
            let mu = grads.iter().map(|g| g[j]).sum::<f64>() / n;
            let var = grads.iter().map(|g| (g[j] - mu).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt()
        })
        .collect();
    mean(&stds)
}

/// Repeats both gradient estimators on one scene with a fixed network and
/// records wall time and gradient spread per sequence count.
///
/// The efficient timing covers precomputation, sampling and backward passes;
/// the reward baseline is estimated once up front and shared.
pub fn variance_benchmark(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    net: &EnergyNet,
    settings: &AgentSettings,
    cfg: &VarianceConfig,
    seed: u64,
) -> Result<VarianceReport> {
    if cfg.repetitions < 2 {
        return Err(Error::Config(
            "variance benchmark needs at least 2 repetitions".into(),
        ));
    }
    if cfg.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    workers.install(|| run(scene, pool, net, settings, cfg, seed))
}

fn run(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    net: &EnergyNet,
    settings: &AgentSettings,
    cfg: &VarianceConfig,
    seed: u64,
) -> Result<VarianceReport> {
    let params = settings.episode;
    let count = net.param_count();
    let components: Vec<usize> = if count <= cfg.components {
        (0..count).collect()
    } else {
        let mut rng = seeds::stream_rng(seed, Stream::Bench, &[0]);
        let mut idx = rand::seq::index::sample(&mut rng, count, cfg.components).into_vec();
        idx.sort_unstable();
        idx
    };
    let baseline = {
        let pre = PrecomputedStates::build(scene, pool, net, settings);
        estimate_baseline(
            &pre,
            &params,
            cfg.baseline_sequences.max(1),
            seeds::derive(seed, Stream::Baseline, &[]),
        )
    };

    let mut rows = Vec::new();
    for &m in &cfg.efficient_m {
        let mut grads = Vec::new();
        let (mut total, mut pre_t, mut samp_t, mut grad_t) = (vec![], vec![], vec![], vec![]);
        for rep in 0..cfg.repetitions {
            let episodes = seeds::derive(seed, Stream::Bench, &[1, m, rep as u64]);
            let t0 = Instant::now();
            let pre = PrecomputedStates::build(scene, pool, net, settings);
            let t1 = Instant::now();
            let tables = sample_and_accumulate(&pre, &params, m, baseline, episodes);
            let t2 = Instant::now();
            let g = finalize_gradient(&pre, &tables, net);
            let t3 = Instant::now();
            total.push((t3 - t0).as_secs_f64());
            pre_t.push((t1 - t0).as_secs_f64());
            samp_t.push((t2 - t1).as_secs_f64());
            grad_t.push((t3 - t2).as_secs_f64());
            grads.push(g);
        }
        rows.push(VarianceRow {
            estimator: "efficient".into(),
            m,
            repetitions: cfg.repetitions,
            mean_time_s: mean(&total),
            mean_precompute_s: mean(&pre_t),
            mean_sampling_s: mean(&samp_t),
            mean_gradient_s: mean(&grad_t),
            gradient_std: mean_component_std(&grads, &components),
        });
        log::info!("efficient M={m}: {:.4}s", mean(&total));
    }
    for &m in &cfg.naive_m {
        let mut grads = Vec::new();
        let mut total = Vec::new();
        for rep in 0..cfg.repetitions {
            let episodes = seeds::derive(seed, Stream::Bench, &[2, m, rep as u64]);
            let t0 = Instant::now();
            let g = naive_reinforce_gradient(scene, pool, net, settings, m, baseline, episodes);
            total.push(t0.elapsed().as_secs_f64());
            grads.push(g.gradient);
        }
        rows.push(VarianceRow {
            estimator: "naive".into(),
            m,
            repetitions: cfg.repetitions,
            mean_time_s: mean(&total),
            mean_precompute_s: 0.0,
            mean_sampling_s: 0.0,
            mean_gradient_s: 0.0,
            gradient_std: mean_component_std(&grads, &components),
        });
        log::info!("naive M={m}: {:.4}s", mean(&total));
    }
    Ok(VarianceReport {
        format_version: VARIANCE_FORMAT_VERSION,
        pool_size: pool.pool_size(),
        pixel_count: scene.len(),
        param_count: count,
        components: components.len(),
        baseline,
        workers: cfg.workers,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::EpisodeParams;
    use crate::scene::{generate_scene, sample_hypothesis_pool, SceneConfig};

    #[test]
    fn small_benchmark_shapes() {
        let scene = generate_scene(&SceneConfig::default(), 0, 3).unwrap();
        let pool = sample_hypothesis_pool(&scene, 6, 4).unwrap();
        let net = EnergyNet::init([8, 8], 5);
        let settings = AgentSettings {
            episode: EpisodeParams {
                budget: 12,
                tau_max: 2,
                m_max: 4,
            },
            ..AgentSettings::default()
        };
        let cfg = VarianceConfig {
            pool_size: 6,
            pixel_count: 1000,
            efficient_m: vec![5, 500],
            naive_m: vec![1, 2],
            repetitions: 4,
            components: 1000,
            baseline_sequences: 200,
            workers: 1,
        };
        let report = variance_benchmark(&scene, &pool, &net, &settings, &cfg, 1).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.components, net.param_count());
        assert!(report.rows.iter().all(|r| r.gradient_std.is_finite()));
        let small = report.row("efficient", 5).unwrap().gradient_std;
        let big = report.row("efficient", 500).unwrap().gradient_std;
        assert!(big < small);

        let dir = tempfile::tempdir().unwrap();
        let files = report.write(dir.path(), "variance").unwrap();
        let plot = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(plot.lines().count(), 5);

        let bad = VarianceConfig {
            repetitions: 1,
            ..cfg
        };
        assert!(variance_benchmark(&scene, &pool, &net, &settings, &bad, 1).is_err());
    }
}
