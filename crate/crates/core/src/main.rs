use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use openset_core::evalbench::{generate_synthetic, DataStage, SyntheticDataset};
use openset_core::harness::{
    ablation_sweep, evaluate, run_base_stage, run_fewshot_stage, run_pipeline, write_evaluation, Checkpoint,
    ExperimentConfig, Manifest, SweepGrid,
};
use openset_core::{Error, Result};

/// Few-shot open-set rejection lab on synthetic region proposals.
#[derive(Parser)]
#[command(name = "openset", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Global {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set loss.lambda=1e-2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N --set synthetic.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write one synthetic split as JSON.
    GenData {
        #[arg(long, value_enum, default_value = "test")]
        stage: DataStage,
    },
    /// Train the head and prompts on base classes.
    TrainBase,
    /// Few-shot stage from a base checkpoint, or resume a few-shot checkpoint.
    TrainFewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stop after this many iterations; the checkpoint can be resumed.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Metrics and attribution distributions for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON from `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Confidence threshold below which proposals count as background.
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Ablation grid, one CSV row per point.
    Sweep {
        /// TOML grid with `seeds` and `[[points]]` entries of `name` and `set`.
        #[arg(long, conflicts_with = "preset")]
        grid: Option<PathBuf>,
        /// Built-in grid: toggles, lambda, beta, k, ratio or m.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Base training, few-shot training and evaluation in one go.
    Pipeline,
}

fn resolve(global: &Global) -> Result<(ExperimentConfig, PathBuf)> {
    let mut overrides = global.set.clone();
    if let Some(s) = global.seed {
        overrides.push(format!("seed={s}"));
        overrides.push(format!("synthetic.seed={s}"));
    }
    let mut cfg = ExperimentConfig::load(global.config.as_deref(), &overrides)?;
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    let out = cfg.out.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, out) = resolve(&cli.global)?;
    match cli.verb {
        Verb::GenData { stage } => {
            let data = generate_synthetic(&cfg.synthetic, stage)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(format!("data_{}.json", stage_name(stage)));
            data.save_json(&path)?;
            Manifest::record(&out, &cfg, &[(&format!("data_{}", stage_name(stage)), &path)])?;
            println!("{} proposals -> {}", data.proposals.len(), path.display());
        }
        Verb::TrainBase => {
            let a = run_base_stage(&cfg, &out)?;
            Manifest::record(&out, &cfg, &[("checkpoint_base", &a.checkpoint), ("log_base", &a.log)])?;
            println!("checkpoint -> {}", a.checkpoint.display());
        }
        Verb::TrainFewshot { checkpoint, max_steps } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let a = run_fewshot_stage(&cfg, &ckpt, &out, max_steps)?;
            Manifest::record(&out, &cfg, &[("checkpoint_fewshot", &a.checkpoint), ("log_fewshot", &a.log)])?;
            println!("checkpoint -> {}", a.checkpoint.display());
        }
        Verb::Evaluate { checkpoint, data, theta } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = match data {
                Some(p) => SyntheticDataset::load_json(&p)?,
                None => generate_synthetic(&cfg.synthetic, DataStage::Test)?,
            };
            let eval = evaluate(&ckpt, &data, &cfg, theta.unwrap_or(cfg.eval.theta))?;
            let a = write_evaluation(&eval, &out)?;
            record_eval(&out, &cfg, &a.metrics, &a.histogram, &a.local_counts, &a.distribution)?;
            println!("{}", serde_json::to_string_pretty(&eval.metrics)?);
        }
        Verb::Sweep { grid, preset, seeds } => {
            let grid = match (grid, preset) {
                (Some(p), _) => SweepGrid::load(&p)?,
                (None, Some(name)) => SweepGrid::preset(&name, seeds)?,
                (None, None) => return Err(Error::Config("sweep needs --grid or --preset".into())),
            };
            let rows = ablation_sweep(&cfg, &grid, &out)?;
            let csv = out.join("sweep.csv");
            Manifest::record(&out, &cfg, &[("sweep", &csv)])?;
            let failed = rows.iter().filter(|r| r.failures > 0).count();
            println!("{} rows ({} with failures) -> {}", rows.len(), failed, csv.display());
        }
        Verb::Pipeline => {
            let o = run_pipeline(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&o.metrics)?);
        }
    }
    Ok(())
}

fn record_eval(out: &Path, cfg: &ExperimentConfig, m: &Path, h: &Path, l: &Path, d: &Path) -> Result<()> {
    Manifest::record(out, cfg, &[("metrics", m), ("histogram_global", h), ("local_counts", l), ("distribution", d)])?;
    Ok(())
}

fn stage_name(stage: DataStage) -> &'static str {
    match stage {
        DataStage::Base => "base",
        DataStage::Fewshot => "fewshot",
        DataStage::Test => "test",
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
