//! Single-run and grid execution: training, artifact emission, summary and
//! gap tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ifnd_core::dataset::{synth_blobs, Dataset};
use ifnd_core::metrics::{write_metrics_csv, MetricRecord};
use ifnd_core::nn::forward;
use ifnd_core::trainer::{train_from, Checkpoint, TrainObjective};
use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentSpec};
use crate::pca::pca_2d;

pub const VERSION_STRING: &str = concat!("ifnd ", env!("CARGO_PKG_VERSION"));

/// Artifact paths and the final metric record of a completed run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub name: String,
    pub out_dir: PathBuf,
    pub classes: usize,
    pub final_record: Option<MetricRecord>,
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Synthetic {
            classes,
            per_class,
            dim,
            spread,
            seed,
        } => Ok(synth_blobs(*classes, *per_class, *dim, *spread, *seed)),
        DatasetConfig::File { features, labels } => {
            Dataset::read_files(features, labels).context("loading dataset files")
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    name: &'a str,
    objective: &'a str,
    schedule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from_epoch: Option<usize>,
    files: ManifestFiles,
    config: &'a ExperimentSpec,
}

#[derive(Serialize)]
struct ManifestFiles {
    config: &'static str,
    metrics: &'static str,
    checkpoint: &'static str,
    label_state: &'static str,
    embedding_dump: &'static str,
}

const FILE_CONFIG: &str = "config.toml";
const FILE_METRICS: &str = "metrics.csv";
const FILE_CHECKPOINT: &str = "checkpoint.json";
const FILE_LABEL_STATE: &str = "label_state.txt";
const FILE_DUMP: &str = "embedding_2d.txt";
const FILE_MANIFEST: &str = "manifest.toml";

/// Executes one experiment: trains, then writes the metrics CSV, final
/// checkpoint, label state, 2-D embedding dump, resolved config, and a
/// manifest listing all of them.
pub fn run(spec: &ExperimentSpec) -> Result<RunArtifacts> {
    run_resumable(spec, None)
}

pub fn run_resumable(spec: &ExperimentSpec, resume: Option<Checkpoint>) -> Result<RunArtifacts> {
    if let DatasetConfig::File { features, labels } = &spec.dataset {
        for p in [features, labels] {
            if !p.exists() {
                anyhow::bail!("dataset file {} does not exist", p.display());
            }
        }
    }
    let dataset = load_dataset(&spec.dataset)?;
    let classes = dataset.class_count();
    fs::create_dir_all(&spec.out_dir)
        .with_context(|| format!("creating {}", spec.out_dir.display()))?;

    let resumed_from_epoch = resume.as_ref().map(|c| c.epochs_completed);
    let output = train_from(&dataset, &spec.train, resume)?;

    let metrics_path = spec.out_dir.join(FILE_METRICS);
    let mut f = fs::File::create(&metrics_path)?;
    write_metrics_csv(&mut f, &output.records)?;

    output
        .to_checkpoint()
        .save(&spec.out_dir.join(FILE_CHECKPOINT))?;

    let mut state_file = fs::File::create(spec.out_dir.join(FILE_LABEL_STATE))?;
    output.state.write_text(&mut state_file)?;

    // final encoder features projected to two principal components
    let fwd = forward(&output.params, &dataset.samples)?;
    let proj = pca_2d(&fwd.features);
    let mut dump = fs::File::create(spec.out_dir.join(FILE_DUMP))?;
    proj.write_text(&mut dump)?;

    let config_echo = toml::to_string_pretty(spec).context("serializing resolved config")?;
    fs::write(spec.out_dir.join(FILE_CONFIG), config_echo)?;

    let manifest = Manifest {
        version: VERSION_STRING,
        name: &spec.name,
        objective: spec.train.objective.as_str(),
        schedule: spec.train.schedule.describe(),
        resumed_from_epoch,
        files: ManifestFiles {
            config: FILE_CONFIG,
            metrics: FILE_METRICS,
            checkpoint: FILE_CHECKPOINT,
            label_state: FILE_LABEL_STATE,
            embedding_dump: FILE_DUMP,
        },
        config: spec,
    };
    fs::write(
        spec.out_dir.join(FILE_MANIFEST),
        toml::to_string_pretty(&manifest).context("serializing manifest")?,
    )?;

    Ok(RunArtifacts {
        name: spec.name.clone(),
        out_dir: spec.out_dir.clone(),
        classes,
        final_record: output.records.last().cloned(),
    })
}

/// One row of the grid summary.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub name: String,
    pub objective: TrainObjective,
    pub scheme: String,
    pub initial_rate: f64,
    pub final_rate: f64,
    pub classes: Option<usize>,
    pub seed: u64,
    pub status: RunStatus,
    pub record: Option<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

pub const SUMMARY_CSV_HEADER: &str =
    "name,objective,scheme,initial_rate,final_rate,classes,seed,status,epoch,mtpr,mtnr,nmi,loss,probe_acc";

impl SummaryRow {
    fn to_csv(&self) -> String {
        let classes = self
            .classes
            .map(|c| c.to_string())
            .unwrap_or_default();
        match (&self.status, &self.record) {
            (RunStatus::Ok, Some(r)) => format!(
                "{},{},{},{},{},{},{},OK,{},{},{},{},{},{}",
                self.name,
                self.objective.as_str(),
                self.scheme,
                self.initial_rate,
                self.final_rate,
                classes,
                self.seed,
                r.epoch,
                r.mtpr,
                r.mtnr,
                r.nmi,
                r.loss,
                r.probe_acc
            ),
            _ => format!(
                "{},{},{},{},{},{},{},FAILED,,,,,,",
                self.name,
                self.objective.as_str(),
                self.scheme,
                self.initial_rate,
                self.final_rate,
                classes,
                self.seed
            ),
        }
    }
}

/// Runs every spec (optionally on a worker pool), continuing past failures,
/// and writes `summary.csv` plus `gaps.csv` under `out_dir`.
pub fn run_grid(specs: &[ExperimentSpec], jobs: usize, out_dir: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out_dir)?;
    let results: Vec<Result<RunArtifacts>> = execute_all(specs, jobs);

    let mut rows = Vec::with_capacity(specs.len());
    for (spec, result) in specs.iter().zip(results) {
        let scheme = format!("{:?}", spec.train.schedule.scheme).to_lowercase();
        let row = match result {
            Ok(artifacts) => SummaryRow {
                name: spec.name.clone(),
                objective: spec.train.objective,
                scheme,
                initial_rate: spec.train.schedule.initial_rate,
                final_rate: spec.train.schedule.final_rate,
                classes: Some(artifacts.classes),
                seed: spec.train.seed,
                status: RunStatus::Ok,
                record: artifacts.final_record,
            },
            Err(e) => SummaryRow {
                name: spec.name.clone(),
                objective: spec.train.objective,
                scheme,
                initial_rate: spec.train.schedule.initial_rate,
                final_rate: spec.train.schedule.final_rate,
                classes: spec.dataset.classes_hint(),
                seed: spec.train.seed,
                status: RunStatus::Failed(e.to_string()),
                record: None,
            },
        };
        rows.push(row);
    }

    let mut summary = fs::File::create(out_dir.join("summary.csv"))?;
    writeln!(summary, "{SUMMARY_CSV_HEADER}")?;
    for row in &rows {
        writeln!(summary, "{}", row.to_csv())?;
    }

    write_gap_table(&rows, &out_dir.join("gaps.csv"))?;
    Ok(rows)
}

#[cfg(feature = "parallel")]
fn execute_all(specs: &[ExperimentSpec], jobs: usize) -> Vec<Result<RunArtifacts>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| specs.par_iter().map(run).collect())
}

#[cfg(not(feature = "parallel"))]
fn execute_all(specs: &[ExperimentSpec], _jobs: usize) -> Vec<Result<RunArtifacts>> {
    specs.iter().map(run).collect()
}

/// Probe-accuracy gaps of the self-supervised objectives against the oracle,
/// grouped by class count and seed, with a per-class-count mean row. Written
/// only when the grid contains the oracle and at least one comparison
/// objective.
pub const GAPS_CSV_HEADER: &str =
    "classes,seed,probe_oracle,probe_inst,probe_elim,gap_oracle_inst,gap_oracle_elim";

fn write_gap_table(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let probe = |objective: TrainObjective, classes: usize, seed: u64| -> Option<f64> {
        rows.iter()
            .find(|r| {
                r.objective == objective
                    && r.classes == Some(classes)
                    && r.seed == seed
                    && r.status == RunStatus::Ok
            })
            .and_then(|r| r.record.as_ref())
            .map(|rec| rec.probe_acc)
    };

    let mut keys: Vec<(usize, u64)> = rows
        .iter()
        .filter(|r| r.objective == TrainObjective::AttrOracle && r.classes.is_some())
        .map(|r| (r.classes.unwrap(), r.seed))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.is_empty() {
        return Ok(());
    }

    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = fs::File::create(path)?;
    writeln!(out, "{GAPS_CSV_HEADER}")?;
    let mut class_counts: Vec<usize> = keys.iter().map(|(c, _)| *c).collect();
    class_counts.dedup();
    for &classes in &class_counts {
        let seeds: Vec<u64> = keys
            .iter()
            .filter(|(c, _)| *c == classes)
            .map(|(_, s)| *s)
            .collect();
        let mut sums = [0.0f64; 5];
        let mut counts = [0usize; 5];
        for &seed in &seeds {
            let oracle = probe(TrainObjective::AttrOracle, classes, seed);
            let inst = probe(TrainObjective::Inst, classes, seed);
            let elim = probe(TrainObjective::Elim, classes, seed);
            let gap_inst = oracle.zip(inst).map(|(o, i)| o - i);
            let gap_elim = oracle.zip(elim).map(|(o, e)| o - e);
            writeln!(
                out,
                "{classes},{seed},{},{},{},{},{}",
                fmt(oracle),
                fmt(inst),
                fmt(elim),
                fmt(gap_inst),
                fmt(gap_elim)
            )?;
            for (slot, v) in [oracle, inst, elim, gap_inst, gap_elim].iter().enumerate() {
                if let Some(x) = v {
                    sums[slot] += x;
                    counts[slot] += 1;
                }
            }
        }
        let mean = |slot: usize| -> Option<f64> {
            (counts[slot] > 0).then(|| sums[slot] / counts[slot] as f64)
        };
        writeln!(
            out,
            "{classes},mean,{},{},{},{},{}",
            fmt(mean(0)),
            fmt(mean(1)),
            fmt(mean(2)),
            fmt(mean(3)),
            fmt(mean(4))
        )?;
    }
    Ok(())
}
