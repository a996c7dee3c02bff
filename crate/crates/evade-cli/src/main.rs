//! Command-line entry point. Exit codes: 0 on success, 1 for
//! configuration problems (bad flags, bad TOML, unreadable dataset),
//! 2 when a pipeline stage fails.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use evade_cli::cache;
use evade_cli::config::{ConfigError, RunConfig};
use evade_cli::stages::{self, AttackFilter, EnsembleKind, SplitChoice, StageCtx};
use evade_core::attack::AttackMethod;
use evade_core::data::{self, LabeledDataset};
use evade_core::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(
    name = "evade-cli",
    version,
    about = "Train an import-vector malware detector, distill it, and evaluate targeted evasion"
)]
struct Cli {
    /// TOML config file; every field has a default, so it may be omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory root; overrides EVADE_OUT_DIR and the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Comma-separated run seeds, overriding the config file.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Dataset CSV path, overriding the config file.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic import-vector dataset CSV.
    SynthDataset {
        /// Dataset size preset.
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
        /// Where to write the CSV; defaults to the configured dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generation seed (independent of the run seeds).
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Stratified train / tuning / early-stop / test split.
    Split,
    /// Train the detector and/or the benign-only guide ensemble.
    TrainEnsemble {
        #[arg(long, value_enum, default_value_t = Which::Both)]
        which: Which,
    },
    /// Fix each malware sample's benign target class via the guide.
    AssignTargets,
    /// Distill the detector into the differentiable proxy.
    Distill,
    /// Random-search the generator hyperparameters.
    TuneCvae,
    /// Train the generator with the tuned configuration.
    TrainCvae,
    /// Run the attack grid against the detector on the test split.
    Attack {
        /// Restrict the emitted view to one method (the full grid is still
        /// computed and cached).
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Restrict the emitted view to one insertion budget.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evasion metrics plus detector/proxy diagnostics for each seed.
    Evaluate,
    /// Cross-seed aggregate report.
    Report,
    /// Write encoder embeddings for a chosen split to CSV.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// The full pipeline: every stage for every seed, then the report.
    Run,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Which {
    A,
    B,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Cvae,
    MostPopular,
    Random,
}

impl From<MethodArg> for AttackMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cvae => AttackMethod::Cvae,
            MethodArg::MostPopular => AttackMethod::MostPopular,
            MethodArg::Random => AttackMethod::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    ValTune,
    ValEs,
    Test,
    All,
}

impl From<SplitArg> for SplitChoice {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitChoice::Train,
            SplitArg::ValTune => SplitChoice::ValTune,
            SplitArg::ValEs => SplitChoice::ValEs,
            SplitArg::Test => SplitChoice::Test,
            SplitArg::All => SplitChoice::All,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<ConfigError>().is_some() {
                1
            } else {
                2
            };
            ExitCode::from(code)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.out_dir.is_none() {
        if let Ok(env_dir) = std::env::var("EVADE_OUT_DIR") {
            if !env_dir.is_empty() {
                cfg.run.out_dir = PathBuf::from(env_dir);
            }
        }
    }
    if let Some(dir) = cli.out_dir {
        cfg.run.out_dir = dir;
    }
    if let Some(seeds) = cli.seeds {
        cfg.run.seeds = seeds;
    }
    if let Some(path) = cli.dataset {
        cfg.dataset.path = path;
    }
    cfg.validate()?;

    if let Cmd::SynthDataset { scale, out, seed } = &cli.cmd {
        let synth_cfg = match scale {
            Scale::Desk => SynthConfig::desk_scale(),
            Scale::Full => SynthConfig::full_scale(),
        };
        let ds = synth::generate(&synth_cfg, *seed);
        let out = out.clone().unwrap_or_else(|| cfg.dataset.path.clone());
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        data::write_dataset(&ds, &out)?;
        println!(
            "stage=synth_dataset status=done path={} samples={} features={} classes={}",
            out.display(),
            ds.n_samples(),
            ds.n_features(),
            ds.num_classes()
        );
        return Ok(());
    }

    let (ds, dataset_hash) = load_dataset_checked(&cfg)?;

    let per_seed = |f: &dyn Fn(&StageCtx) -> Result<()>| -> Result<()> {
        for &seed in &cfg.run.seeds {
            let ctx = StageCtx {
                cfg: &cfg,
                seed,
                ds: &ds,
                dataset_hash: &dataset_hash,
            };
            f(&ctx)?;
        }
        Ok(())
    };

    match cli.cmd {
        Cmd::SynthDataset { .. } => unreachable!("handled above"),
        Cmd::Split => per_seed(&stages::split),
        Cmd::TrainEnsemble { which } => per_seed(&move |ctx: &StageCtx| {
            match which {
                Which::A => stages::train_ensemble(ctx, EnsembleKind::Detector)?,
                Which::B => stages::train_ensemble(ctx, EnsembleKind::Guide)?,
                Which::Both => {
                    stages::train_ensemble(ctx, EnsembleKind::Detector)?;
                    stages::train_ensemble(ctx, EnsembleKind::Guide)?;
                }
            }
            Ok(())
        }),
        Cmd::AssignTargets => per_seed(&stages::assign_targets),
        Cmd::Distill => per_seed(&stages::distill),
        Cmd::TuneCvae => per_seed(&stages::tune_cvae),
        Cmd::TrainCvae => per_seed(&stages::train_cvae),
        Cmd::Attack { method, k } => {
            let filter = AttackFilter {
                method: method.map(AttackMethod::from),
                k,
            };
            per_seed(&move |ctx: &StageCtx| stages::attack(ctx, &filter))
        }
        Cmd::Evaluate => per_seed(&stages::evaluate),
        Cmd::Report => stages::report(&cfg, &ds, &dataset_hash),
        Cmd::ExportEmbeddings { split } => {
            let choice = SplitChoice::from(split);
            per_seed(&move |ctx: &StageCtx| stages::export_embeddings(ctx, choice))
        }
        Cmd::Run => stages::run_all(&cfg, &ds, &dataset_hash),
    }
}

/// Load and hash the dataset; any failure here is a configuration error
/// (exit 1), not a stage failure.
fn load_dataset_checked(cfg: &RunConfig) -> Result<(LabeledDataset, String)> {
    let path = &cfg.dataset.path;
    let bytes = std::fs::read(path).map_err(|e| {
        ConfigError::Invalid(format!("cannot read dataset {}: {e}", path.display()))
    })?;
    let hash = cache::sha256_bytes(&bytes);
    let ds = data::load_dataset(path)
        .map_err(|e| ConfigError::Invalid(format!("invalid dataset {}: {e}", path.display())))?;
    Ok((ds, hash))
}
