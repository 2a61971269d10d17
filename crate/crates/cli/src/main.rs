mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use poseagent::config::RunConfig;
use poseagent::eval::Method;

/// Budget-constrained pose refinement: generate scenes, train the agent,
/// evaluate it against the baselines and benchmark the gradient estimators.
#[derive(Debug, Parser)]
#[command(name = "poseagent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the scenes of all splits as `scenes/scene_<id>.json`.
    Generate(Common),
    /// Train on the training split and keep the best validation snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene directory written by `generate` (default: <out>/scenes).
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Snapshot to resume from, or a model to start from.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Matched-budget comparison on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated method names, or `all`.
        #[arg(long, value_parser = parse_methods)]
        methods: Option<MethodList>,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        common: Common,
        /// Start from a built-in preset instead of the defaults.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Gradient spread against wall time for both estimators.
    VarianceBench {
        #[command(flatten)]
        common: Common,
        /// Network to differentiate (default: a freshly initialized one).
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-scale budget and pool (B⁰ = 77, N = 210).
    Default,
    /// One-core training setting (B⁰ = 12, N = 32).
    Desk,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Debug)]
struct MethodList(Vec<Method>);

fn parse_methods(text: &str) -> Result<MethodList, String> {
    Method::parse_list(text)
        .map(MethodList)
        .map_err(|e| e.to_string())
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        self.load_from(RunConfig::default())
    }

    fn load_from(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(w) = self.workers {
            anyhow::ensure!(w >= 1, "--workers must be at least 1");
            cfg.variance.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn init_workers(&self) -> Result<()> {
        if let Some(w) = self.workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build_global()?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.load()?;
            commands::generate(&cfg)
        }
        Command::Train {
            common,
            scenes,
            model,
        } => {
            let cfg = common.load()?;
            common.init_workers()?;
            commands::train(&cfg, scenes.as_deref(), model.as_deref())
        }
        Command::Eval {
            common,
            scenes,
            model,
            methods,
        } => {
            let mut cfg = common.load()?;
            if let Some(MethodList(m)) = methods {
                cfg.eval.methods = m;
            }
            common.init_workers()?;
            commands::eval(&cfg, scenes.as_deref(), &model)
        }
        Command::Config { common, preset } => {
            anyhow::ensure!(
                common.config.is_none() || preset.is_none(),
                "--config and --preset are mutually exclusive"
            );
            let base = match preset {
                Some(Preset::Desk) => RunConfig::desk(),
                _ => RunConfig::default(),
            };
            print!("{}", common.load_from(base)?.to_toml()?);
            Ok(())
        }
        Command::VarianceBench { common, model } => {
            let cfg = common.load()?;
            commands::variance_bench(&cfg, model.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
