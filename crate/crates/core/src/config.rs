//! Experiment manifest: every parameter of a run in one TOML file.
//!
//! Files are written as flat dotted keys (`train.learning_rate = 0.3`), but
//! any TOML layout that yields the same tree parses, so `[train]` tables work
//! as well.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentSettings, EpisodeParams};
use crate::energymodel::OracleScorer;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, VarianceConfig};
use crate::scene::{
    generate_scene, sample_hypothesis_pool, HypothesisPool, SceneConfig, SyntheticScene,
};
use crate::seeds::{self, Stream};
use crate::train::{PrecomputedStates, TrainConfig};

/// Pool size and how many scenes of each split `generate` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Hypotheses per pool (N).
    pub pool_size: usize,
    pub train_scenes: u64,
    pub validation_scenes: u64,
    pub test_scenes: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pool_size: 210,
            train_scenes: 300,
            validation_scenes: 100,
            test_scenes: 200,
        }
    }
}

/// Which part of the data a scene id belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl DataConfig {
    pub fn total_scenes(&self) -> u64 {
        self.train_scenes + self.validation_scenes + self.test_scenes
    }

    /// Scene ids of a split: training first, then validation, then test.
    pub fn ids(&self, split: Split) -> std::ops::Range<u64> {
        let v = self.train_scenes;
        let t = v + self.validation_scenes;
        match split {
            Split::Train => 0..v,
            Split::Validation => v..t,
            Split::Test => t..t + self.test_scenes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub agent: AgentSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub variance: VarianceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            agent: AgentSettings::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            variance: VarianceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small setting that trains on one CPU core in about a minute:
    /// N = 32, B⁰ = 12, τ_max = 3, m_max = 4, M = 2000.
    pub fn desk() -> Self {
        Self {
            data: DataConfig {
                pool_size: 32,
                ..DataConfig::default()
            },
            agent: AgentSettings {
                episode: EpisodeParams {
                    budget: 12,
                    tau_max: 3,
                    m_max: 4,
                },
                ..AgentSettings::default()
            },
            train: TrainConfig {
                learning_rate: 0.3,
                sequences: 2000,
                baseline_sequences: 2000,
                epochs: 30,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                k_top: 4,
                ..EvalConfig::default()
            },
            variance: VarianceConfig {
                baseline_sequences: 2000,
                ..VarianceConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.agent.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.pool_size == 0 {
            return Err(Error::Config("data.pool_size must be at least 1".into()));
        }
        if self.variance.workers == 0 {
            return Err(Error::Config("variance.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `dotted.key = value` line per leaf, sorted by key.
    pub fn to_toml(&self) -> Result<String> {
        let tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        let mut out = String::new();
        for (key, value) in lines {
            out.push_str(&format!("{key} = {value}\n"));
        }
        Ok(out)
    }

    /// Scene `id` generated from the master seed.
    pub fn scene(&self, id: u64) -> Result<SyntheticScene> {
        generate_scene(
            &self.scene,
            id,
            seeds::derive(self.master_seed, Stream::Scene, &[id]),
        )
    }

    /// The hypothesis pool of a scene, `data.pool_size` hypotheses.
    pub fn pool(&self, scene: &SyntheticScene) -> Result<HypothesisPool> {
        self.pool_of_size(scene, self.data.pool_size)
    }

    pub fn pool_of_size(&self, scene: &SyntheticScene, n: usize) -> Result<HypothesisPool> {
        sample_hypothesis_pool(
            scene,
            n,
            seeds::derive(self.master_seed, Stream::Pool, &[scene.scene_id, n as u64]),
        )
    }

    /// Scene and pool for the variance benchmark: the first test-split scene,
    /// generated at `variance.pixel_count` pixels, whose pool of
    /// `variance.pool_size` hypotheses holds one that refinement makes correct.
    /// Without one every reward is −1 and the gradient vanishes.
    pub fn variance_scene(&self) -> Result<(SyntheticScene, HypothesisPool)> {
        let cfg = SceneConfig {
            pixel_count: self.variance.pixel_count,
            ..self.scene.clone()
        };
        let start = self.data.ids(Split::Test).start;
        for id in start..start + 100 {
            let seed = seeds::derive(self.master_seed, Stream::Scene, &[id]);
            let scene = generate_scene(&cfg, id, seed)?;
            let pool = self.pool_of_size(&scene, self.variance.pool_size)?;
            let pre = PrecomputedStates::build(
                &scene,
                &pool,
                &OracleScorer { sharpness: 1.0 },
                &self.agent,
            );
            if pre.recoverable_count() > 0 {
                return Ok((scene, pool));
            }
        }
        Err(Error::Config(
            "no benchmark scene with a recoverable hypothesis among 100 candidates".into(),
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::parse(path, m),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}
