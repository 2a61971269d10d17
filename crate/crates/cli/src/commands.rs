use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use poseagent::config::{RunConfig, Split};
use poseagent::energymodel::{ModelFile, TrainingState};
use poseagent::eval::{matched_budget_eval, variance_benchmark};
use poseagent::scene::{HypothesisPool, SyntheticScene};
use poseagent::seeds::{self, Stream};
use poseagent::train::{skip_reason, training_loop, write_log_csv, PrecomputedStates};
use poseagent::EnergyNet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::Outputs;

const MANIFEST_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Scene ids per split, written next to the scene files.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    master_seed: u64,
    train: Vec<u64>,
    validation: Vec<u64>,
    test: Vec<u64>,
}

impl Manifest {
    fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!(
                "reading {} (run `poseagent generate` first)",
                path.display()
            )
        })?;
        let m: Manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            bail!(
                "{}: unsupported manifest format version {} (expected {})",
                path.display(),
                m.format_version,
                MANIFEST_FORMAT_VERSION
            );
        }
        Ok(m)
    }
}

fn scene_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("scene_{id}.json"))
}

fn scene_dir(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.out_dir.join("scenes"), Path::to_path_buf)
}

/// Loads scenes and samples their pools, in id order.
fn load_scenes(
    cfg: &RunConfig,
    dir: &Path,
    ids: &[u64],
) -> Result<Vec<(SyntheticScene, HypothesisPool)>> {
    ids.par_iter()
        .map(|&id| {
            let scene = SyntheticScene::load(&scene_path(dir, id))
                .with_context(|| format!("scene {id}"))?;
            if scene.scene_id != id {
                bail!("scene {id}: file holds scene {}", scene.scene_id);
            }
            let pool = cfg.pool(&scene).with_context(|| format!("scene {id}"))?;
            Ok((scene, pool))
        })
        .collect()
}

fn load_model(path: &Path) -> Result<(EnergyNet, Option<TrainingState>)> {
    let file = ModelFile::load(path)?;
    let net = file
        .to_net()
        .with_context(|| format!("loading model {}", path.display()))?;
    Ok((net, file.training))
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    if cfg.data.total_scenes() == 0 {
        log::warn!("no scenes requested");
        return Ok(());
    }
    let dir = cfg.out_dir.join("scenes");
    let mut out = Outputs::default();
    out.dir(&dir)?;
    let ids = |s| cfg.data.ids(s).collect::<Vec<_>>();
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        master_seed: cfg.master_seed,
        train: ids(Split::Train),
        validation: ids(Split::Validation),
        test: ids(Split::Test),
    };
    for id in 0..cfg.data.total_scenes() {
        let scene = cfg.scene(id).with_context(|| format!("scene {id}"))?;
        out.write(&scene_path(&dir, id), scene.to_json()?)?;
    }
    out.write(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    out.write(&cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let files = out.commit();
    log::info!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, scenes: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let dir = scene_dir(cfg, scenes);
    let manifest = Manifest::load(&dir)?;
    let (net, resume) = match model {
        Some(path) => load_model(path)?,
        None => (
            EnergyNet::init(
                cfg.train.hidden,
                seeds::derive(cfg.master_seed, Stream::Init, &[]),
            ),
            None,
        ),
    };
    let resume_update = resume.as_ref().map(|s| s.update_index);

    let build = |pairs: Vec<(SyntheticScene, HypothesisPool)>| -> Vec<PrecomputedStates> {
        pairs
            .par_iter()
            .map(|(s, p)| PrecomputedStates::build(s, p, &net, &cfg.agent))
            .collect()
    };
    let mut train = build(load_scenes(cfg, &dir, &manifest.train)?);
    let mut validation = build(load_scenes(cfg, &dir, &manifest.validation)?);
    let eligible = train
        .iter()
        .filter(|t| skip_reason(t, cfg.train.max_recoverable_fraction).is_none())
        .count();
    if eligible == 0 {
        log::warn!(
            "none of the {} training scenes is eligible for an update",
            train.len()
        );
    } else {
        log::info!("{eligible} of {} training scenes are eligible", train.len());
    }

    let mut out = Outputs::default();
    let snap_dir = cfg.out_dir.join("snapshots");
    out.dir(&snap_dir)?;
    let outcome = training_loop(
        &mut train,
        &mut validation,
        &cfg.agent.episode,
        &cfg.train,
        net,
        resume,
        cfg.master_seed,
        |snap| {
            if Some(snap.update_index) == resume_update {
                return Ok(());
            }
            let path = snap_dir.join(format!("snapshot_{:06}.json", snap.update_index));
            out.track(&path);
            ModelFile::from_net(&snap.net, Some(snap.training_state())).save(&path)
        },
    )?;

    let selected = &outcome.selected;
    let model_path = cfg.out_dir.join("model.json");
    out.track(&model_path);
    ModelFile::from_net(&selected.net, Some(selected.training_state())).save(&model_path)?;

    let log_path = cfg.out_dir.join("train_log.csv");
    let mut csv = Vec::new();
    write_log_csv(&outcome.log, &mut csv)?;
    out.write(&log_path, csv)?;

    let summary = serde_json::json!({
        "selected_update": selected.update_index,
        "selected_validation_success": selected.validation_success,
        "updates": outcome.state.update_index,
        "snapshots": outcome.snapshots.iter().map(|s| serde_json::json!({
            "update": s.update_index,
            "validation_success": s.validation_success,
        })).collect::<Vec<_>>(),
    });
    out.write(
        &cfg.out_dir.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    out.commit();
    log::info!(
        "{} updates; selected snapshot at update {} (validation {:?}) -> {}",
        outcome.state.update_index,
        selected.update_index,
        selected.validation_success,
        model_path.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, scenes: Option<&Path>, model: &Path) -> Result<()> {
    let (net, _) = load_model(model)?;
    let dir = scene_dir(cfg, scenes);
    let manifest = Manifest::load(&dir)?;
    let pairs = load_scenes(cfg, &dir, &manifest.test)?;
    let report = matched_budget_eval(&pairs, &net, &cfg.eval, &cfg.agent, cfg.master_seed)?;

    let mut out = Outputs::default();
    out.dir(&cfg.out_dir)?;
    for suffix in [".json", ".csv", "_scenes.csv"] {
        out.track(cfg.out_dir.join(format!("eval{suffix}")));
    }
    report.write(&cfg.out_dir, "eval")?;
    out.commit();

    println!(
        "budget {} (fixed schedule averaged {:.3} steps) on {} scenes",
        report.budget,
        report.fixed_schedule_avg_steps,
        pairs.len()
    );
    println!(
        "{:<16} {:>10} {:>16}",
        "method", "success %", "avg ref. steps"
    );
    for m in &report.methods {
        println!(
            "{:<16} {:>10.2} {:>16.3}",
            m.method.name(),
            m.success_rate,
            m.avg_refinement_steps
        );
    }
    Ok(())
}

pub fn variance_bench(cfg: &RunConfig, model: Option<&Path>) -> Result<()> {
    let net = match model {
        Some(path) => load_model(path)?.0,
        None => EnergyNet::init(
            cfg.train.hidden,
            seeds::derive(cfg.master_seed, Stream::Init, &[]),
        ),
    };
    let (scene, pool) = cfg.variance_scene()?;
    log::info!(
        "benchmark scene {} with {} pixels and {} hypotheses",
        scene.scene_id,
        scene.len(),
        pool.pool_size()
    );
    let report = variance_benchmark(
        &scene,
        &pool,
        &net,
        &cfg.agent,
        &cfg.variance,
        cfg.master_seed,
    )?;

    let mut out = Outputs::default();
    out.dir(&cfg.out_dir)?;
    for suffix in [".json", ".csv", "_plot.dat"] {
        out.track(cfg.out_dir.join(format!("variance{suffix}")));
    }
    report.write(&cfg.out_dir, "variance")?;
    out.commit();

    println!(
        "{:<10} {:>8} {:>12} {:>14}",
        "estimator", "M", "time s", "gradient std"
    );
    for r in &report.rows {
        println!(
            "{:<10} {:>8} {:>12.6} {:>14.6e}",
            r.estimator, r.m, r.mean_time_s, r.gradient_std
        );
    }
    Ok(())
}
