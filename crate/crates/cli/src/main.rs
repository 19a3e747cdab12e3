//! `ifnd` command line: dataset synthesis, training runs, ablation grids,
//! standalone metrics, and 2-D embedding dumps.
//!
//! Exit codes: 0 on success, 1 for configuration errors (bad flags, bad
//! config files), 2 for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ifnd_cli::config::{ExperimentSpec, GridConfigFile, RunConfigFile};
use ifnd_cli::experiment::{run_grid, run_resumable, RunStatus};
use ifnd_cli::pca::pca_2d;
use ifnd_core::dataset::synth_blobs;
use ifnd_core::embedding::EmbeddingMatrix;
use ifnd_core::loss::PseudoLabel;
use ifnd_core::metrics::{detected_to_clusters, mtnr, mtpr, nmi, LabeledSet};
use ifnd_core::nn::forward;
use ifnd_core::trainer::{Checkpoint, TrainObjective};

#[derive(Parser)]
#[command(name = "ifnd", version, about = "Contrastive learning with incremental false-negative detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob dataset.
    Synth(SynthArgs),
    /// Train one experiment from a config file.
    Train(TrainArgs),
    /// Expand a grid config and run every member.
    Grid(GridArgs),
    /// Compute MTPR / MTNR / NMI from label files.
    Metrics(MetricsArgs),
    /// Project encoder features from a checkpoint to two principal components.
    Dump(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0.2)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the feature matrix (text format).
    #[arg(long)]
    features: PathBuf,
    /// Output path for the labels (one integer per line).
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment name.
    #[arg(long)]
    name: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the objective (inst | elim | attr | attr_oracle).
    #[arg(long)]
    objective: Option<String>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Grid config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker count for concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the grid output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Ground-truth class ids, one integer per line.
    #[arg(long)]
    true_labels: PathBuf,
    /// Detected labels, one per line; `*` or `-1` marks a singleton.
    #[arg(long)]
    detected: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature matrix in the text format.
    #[arg(long)]
    features: PathBuf,
    /// Output path for the rows x 2 projection.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits, anything else is a config error
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Train(args) => train(args),
        Command::Grid(args) => grid(args),
        Command::Metrics(args) => metrics(args),
        Command::Dump(args) => dump(args),
    }
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    if args.classes < 1 || args.per_class < 1 || args.dim < 2 {
        return Err(CliError::Config(anyhow::anyhow!(
            "synth needs classes >= 1, per_class >= 1, dim >= 2"
        )));
    }
    if !(args.spread >= 0.0 && args.spread.is_finite()) {
        return Err(CliError::Config(anyhow::anyhow!("spread must be >= 0")));
    }
    let dataset = synth_blobs(args.classes, args.per_class, args.dim, args.spread, args.seed);
    dataset
        .write_files(&args.features, &args.labels)
        .context("writing dataset")
        .map_err(CliError::Runtime)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {} / {}",
        dataset.len(),
        args.classes,
        args.dim,
        args.features.display(),
        args.labels.display()
    );
    Ok(())
}

fn apply_train_overrides(spec: &mut ExperimentSpec, args: &TrainArgs) -> Result<()> {
    if let Some(name) = &args.name {
        spec.name = name.clone();
    }
    if let Some(dir) = &args.out_dir {
        spec.out_dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        spec.train.seed = seed;
    }
    if let Some(objective) = &args.objective {
        spec.train.objective = match objective.as_str() {
            "inst" => TrainObjective::Inst,
            "elim" => TrainObjective::Elim,
            "attr" => TrainObjective::Attr,
            "attr_oracle" => TrainObjective::AttrOracle,
            other => anyhow::bail!("unknown objective {other:?}"),
        };
    }
    if let Some(epochs) = args.epochs {
        spec.train.total_epochs = epochs;
        if spec.train.schedule.total_epochs != epochs {
            spec.train.schedule.total_epochs = epochs;
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfigFile::load(&args.config).map_err(CliError::Config)?;
    let mut spec = cfg.resolve().map_err(CliError::Config)?;
    apply_train_overrides(&mut spec, &args).map_err(CliError::Config)?;
    spec.train
        .validate()
        .map_err(|e| CliError::Config(anyhow::anyhow!("{e}")))?;
    let resume = match &args.resume {
        Some(path) => Some(
            Checkpoint::load(path)
                .context("loading resume checkpoint")
                .map_err(CliError::Config)?,
        ),
        None => None,
    };
    let artifacts = run_resumable(&spec, resume).map_err(CliError::Runtime)?;
    match &artifacts.final_record {
        Some(r) => println!(
            "{}: epoch {} mtpr {:.4} mtnr {:.4} nmi {:.4} loss {:.4} probe {:.4} -> {}",
            artifacts.name,
            r.epoch,
            r.mtpr,
            r.mtnr,
            r.nmi,
            r.loss,
            r.probe_acc,
            artifacts.out_dir.display()
        ),
        None => println!("{}: no refresh epochs -> {}", artifacts.name, artifacts.out_dir.display()),
    }
    Ok(())
}

fn grid(args: GridArgs) -> Result<(), CliError> {
    let mut cfg = GridConfigFile::load(&args.config).map_err(CliError::Config)?;
    if let Some(dir) = args.out_dir {
        cfg.out_dir = Some(dir);
    }
    let specs = cfg.expand().map_err(CliError::Config)?;
    let out_dir = cfg.out_dir();
    let rows = run_grid(&specs, args.jobs, &out_dir).map_err(CliError::Runtime)?;
    let failed = rows
        .iter()
        .filter(|r| matches!(r.status, RunStatus::Failed(_)))
        .count();
    println!(
        "grid {}: {} runs, {} failed -> {}",
        cfg.name,
        rows.len(),
        failed,
        out_dir.display()
    );
    for row in rows.iter().filter(|r| matches!(r.status, RunStatus::Failed(_))) {
        if let RunStatus::Failed(msg) = &row.status {
            eprintln!("  FAILED {}: {msg}", row.name);
        }
    }
    Ok(())
}

fn read_int_labels(path: &PathBuf) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse()
                .with_context(|| format!("bad label {l:?} in {}", path.display()))
        })
        .collect()
}

fn read_detected_labels(path: &PathBuf) -> Result<Vec<PseudoLabel>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            if l == "*" || l == "-1" {
                Ok(PseudoLabel::Singleton)
            } else {
                l.parse()
                    .map(PseudoLabel::Assigned)
                    .with_context(|| format!("bad detected label {l:?} in {}", path.display()))
            }
        })
        .collect()
}

fn metrics(args: MetricsArgs) -> Result<(), CliError> {
    let truth = read_int_labels(&args.true_labels).map_err(CliError::Config)?;
    let detected = read_detected_labels(&args.detected).map_err(CliError::Config)?;
    let set = LabeledSet::new(truth.clone(), detected.clone())
        .map_err(|e| CliError::Config(anyhow::anyhow!("{e}")))?;
    let tpr = mtpr(&set);
    let tnr = mtnr(&set);
    let clusters = detected_to_clusters(&detected);
    let nmi_value = nmi(&truth, &clusters).map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    let body = format!("mtpr,mtnr,nmi\n{},{},{}\n", tpr.value, tnr.value, nmi_value);
    match args.out {
        Some(path) => std::fs::write(path, body).map_err(|e| CliError::Runtime(e.into()))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn dump(args: DumpArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .context("loading checkpoint")
        .map_err(CliError::Config)?;
    let file = std::fs::File::open(&args.features)
        .context("opening features")
        .map_err(CliError::Config)?;
    let matrix = EmbeddingMatrix::read_text(std::io::BufReader::new(file))
        .context("parsing features")
        .map_err(CliError::Config)?;
    let fwd = forward(&checkpoint.params, &matrix)
        .context("forward pass")
        .map_err(CliError::Runtime)?;
    let proj = pca_2d(&fwd.features);
    let mut out = std::fs::File::create(&args.out).map_err(|e| CliError::Runtime(e.into()))?;
    proj.write_text(&mut out).map_err(|e| CliError::Runtime(e.into()))?;
    println!("wrote {} x 2 projection to {}", proj.rows(), args.out.display());
    Ok(())
}
