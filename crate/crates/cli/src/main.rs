use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xrid_core::model::ModelKind;
use xrid_core::motion_io::{AppLabel, DatasetManifest};
use xrid_core::pipeline::{
    evaluate_stage, ingest_stage, preprocess_stage, run_all, stats_stage, synth_stage, train_stage,
    EvalMode, RunConfig,
};

/// Motion-based user identification pipeline.
#[derive(Parser)]
#[command(name = "xrid", version, about)]
struct Cli {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    users: Option<usize>,
    /// Minutes recorded per application.
    #[arg(long)]
    minutes: Option<f64>,
    /// Comma-separated application labels.
    #[arg(long, value_delimiter = ',')]
    apps: Option<Vec<String>>,
    /// Strength of per-application motion changes.
    #[arg(long)]
    modulation: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(DatasetArgs),
    /// Validate recordings and write normalized copies.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Encode recordings into feature windows (cached).
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "slm")]
        model: Kind,
    },
    /// Split the dataset and train a model.
    Train {
        #[arg(long, value_enum)]
        model: Kind,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a trained model.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Output directory of `train`.
        #[arg(long)]
        model_dir: PathBuf,
        /// Test dataset; defaults to the test split saved by `train`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Movement and head-pitch statistics with ANOVA and post-hoc tests.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run every stage end to end.
    All {
        /// Existing dataset; a synthetic one is generated otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Slm,
    Clm,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Slm => ModelKind::Slm,
            Kind::Clm => ModelKind::Clm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Overall,
    CrossApp,
    Sequence,
    Top3,
    Classifier,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Overall => EvalMode::Overall,
            Mode::CrossApp => EvalMode::CrossApp,
            Mode::Sequence => EvalMode::Sequence,
            Mode::Top3 => EvalMode::Top3,
            Mode::Classifier => EvalMode::Classifier,
        }
    }
}

fn apply_dataset(cfg: &mut RunConfig, d: &DatasetArgs) -> Result<()> {
    if let Some(u) = d.users {
        cfg.users = u;
    }
    if let Some(m) = d.minutes {
        cfg.minutes = m;
    }
    if let Some(m) = d.modulation {
        cfg.app_modulation = m;
    }
    if let Some(apps) = &d.apps {
        cfg.apps = apps
            .iter()
            .map(|a| a.parse::<AppLabel>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?;
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth(d) => {
            apply_dataset(&mut cfg, &d)?;
            let m = synth_stage(&cfg, out)?;
            eprintln!("wrote {} recordings to {}", m.entries.len(), out.display());
        }
        Command::Ingest { manifest } => {
            let m = load_manifest(&manifest)?;
            let cfg = cfg.resolve(m.users().len())?;
            let m = ingest_stage(&cfg, &m, out)?;
            eprintln!("ingested {} recordings into {}", m.entries.len(), out.display());
        }
        Command::Preprocess { manifest, model } => {
            let m = load_manifest(&manifest)?;
            let cfg = cfg.resolve(m.users().len())?;
            let (_, summary) = preprocess_stage(&cfg, &m, model.into(), out)?;
            if summary.cache_hit {
                eprintln!("cache hit {}", summary.cache_key);
            }
            print_json(&summary)?;
        }
        Command::Train { model, manifest, epochs } => {
            if epochs.is_some() {
                cfg.epochs = epochs;
            }
            let m = load_manifest(&manifest)?;
            let cfg = cfg.resolve(m.users().len())?;
            print_json(&train_stage(&cfg, &m, model.into(), out)?)?;
        }
        Command::Evaluate { mode, model_dir, manifest } => {
            let m = manifest.as_deref().map(load_manifest).transpose()?;
            let users = m.as_ref().map_or(2, |m| m.users().len().max(2));
            let cfg = cfg.resolve(users)?;
            print_json(&evaluate_stage(&cfg, mode.into(), &model_dir, m.as_ref(), out)?)?;
        }
        Command::Stats { manifest } => {
            let m = load_manifest(&manifest)?;
            let cfg = cfg.resolve(m.users().len())?;
            for f in stats_stage(&cfg, &m, out)? {
                println!("{}", f.display());
            }
        }
        Command::All { manifest, epochs, dataset } => {
            apply_dataset(&mut cfg, &dataset)?;
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if epochs.is_some() {
                cfg.epochs = epochs;
            }
            let start = std::time::Instant::now();
            let all = run_all(cfg, out, |s| eprintln!("[{:>6.1}s] {s}", start.elapsed().as_secs_f64()))?;
            for e in &all.evaluations {
                eprintln!(
                    "{:<10} {:.3}{}",
                    e.mode.as_str(),
                    e.accuracy,
                    e.off_diagonal.map(|o| format!(" (off-diagonal {o:.3})")).unwrap_or_default()
                );
            }
            println!("{}", out.join("summary.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
