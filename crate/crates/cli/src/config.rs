//! TOML run and grid configs, resolved into fully-specified experiment specs.
//!
//! A run config has a `[dataset]` section (synthetic blobs or feature/label
//! files), a `[train]` section with optional subsections `[train.schedule]`,
//! `[train.augment]`, `[train.probe]`, and flag-style top-level fields. A
//! grid config wraps one run config under `[base]` and declares `[axes]`
//! whose cartesian expansion produces the grid. Every run writes its resolved
//! config back out, so partial inputs always have a complete, replayable
//! echo.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ifnd_core::labeling::{AcceptanceSchedule, Scheme};
use ifnd_core::trainer::{AugmentConfig, LrDecay, ProbeConfig, TrainConfig, TrainObjective};
use serde::{Deserialize, Serialize};

/// Where the samples come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    File {
        features: PathBuf,
        labels: PathBuf,
    },
}

impl DatasetConfig {
    pub fn classes_hint(&self) -> Option<usize> {
        match self {
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
            DatasetConfig::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub scheme: Option<Scheme>,
    pub initial_rate: Option<f64>,
    pub final_rate: Option<f64>,
    pub step_epoch: Option<usize>,
    /// Defaults to the run's total epochs.
    pub total_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub noise_sigma: Option<f64>,
    pub scale_jitter: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub train_fraction: Option<f64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: TrainObjective,
    pub total_epochs: Option<usize>,
    pub batch_m: Option<usize>,
    pub tau: Option<f64>,
    pub ks: Option<Vec<usize>>,
    pub refresh_cadence: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<LrDecay>,
    pub momentum: Option<f64>,
    pub seed: Option<u64>,
    pub encoder_widths: Option<Vec<usize>>,
    pub projector_widths: Option<Vec<usize>>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub name: String,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
}

/// A fully-resolved experiment: dataset source, trainer config, output
/// directory.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl TrainSection {
    /// Fills defaults and assembles the trainer config. `classes_hint` backs
    /// the default cluster counts for synthetic datasets.
    pub fn resolve(&self, classes_hint: Option<usize>) -> Result<TrainConfig> {
        let total_epochs = self.total_epochs.unwrap_or(200);
        let ks = match &self.ks {
            Some(ks) => ks.clone(),
            None => match classes_hint {
                Some(c) => vec![c.max(2)],
                None => bail!("train.ks is required for file datasets"),
            },
        };
        let s = &self.schedule;
        let schedule = AcceptanceSchedule::new(
            s.scheme.unwrap_or(Scheme::Linear),
            s.initial_rate.unwrap_or(0.0),
            s.final_rate.unwrap_or(1.0),
            s.step_epoch.unwrap_or(0),
            s.total_epochs.unwrap_or(total_epochs),
        )
        .context("invalid acceptance schedule")?;
        let defaults_augment = AugmentConfig::default();
        let defaults_probe = ProbeConfig::default();
        Ok(TrainConfig {
            total_epochs,
            batch_m: self.batch_m.unwrap_or(64),
            tau: self.tau.unwrap_or(0.2),
            objective: self.objective,
            schedule,
            ks,
            refresh_cadence: self.refresh_cadence.unwrap_or(1),
            learning_rate: self.learning_rate.unwrap_or(0.5),
            lr_decay: self.lr_decay.unwrap_or(LrDecay::Cosine),
            momentum: self.momentum.unwrap_or(0.0),
            seed: self.seed.unwrap_or(0),
            augment: AugmentConfig {
                noise_sigma: self.augment.noise_sigma.unwrap_or(defaults_augment.noise_sigma),
                scale_jitter: self.augment.scale_jitter.unwrap_or(defaults_augment.scale_jitter),
            },
            encoder_widths: self.encoder_widths.clone().unwrap_or_else(|| vec![32]),
            projector_widths: self.projector_widths.clone().unwrap_or_else(|| vec![16]),
            probe: ProbeConfig {
                train_fraction: self
                    .probe
                    .train_fraction
                    .unwrap_or(defaults_probe.train_fraction),
                epochs: self.probe.epochs.unwrap_or(defaults_probe.epochs),
                learning_rate: self
                    .probe
                    .learning_rate
                    .unwrap_or(defaults_probe.learning_rate),
            },
        })
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfigFile =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<ExperimentSpec> {
        let train = self.train.resolve(self.dataset.classes_hint())?;
        train
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid train config: {e}"))?;
        Ok(ExperimentSpec {
            name: self.name.clone(),
            out_dir: self
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(&self.name)),
            dataset: self.dataset.clone(),
            train,
        })
    }
}

/// Grid axes; expansion order is fixed: objective, scheme, final rate,
/// classes, seed.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub objective: Option<Vec<TrainObjective>>,
    pub scheme: Option<Vec<Scheme>>,
    pub final_rate: Option<Vec<f64>>,
    pub classes: Option<Vec<usize>>,
    pub seed: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfigFile {
    pub name: String,
    pub out_dir: Option<PathBuf>,
    pub base: GridBase,
    #[serde(default)]
    pub axes: GridAxes,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBase {
    pub dataset: DatasetConfig,
    pub train: TrainSection,
}

impl GridConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading grid config {}", path.display()))?;
        let cfg: GridConfigFile = toml::from_str(&text)
            .with_context(|| format!("parsing grid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Deterministic cartesian expansion over the declared axes.
    pub fn expand(&self) -> Result<Vec<ExperimentSpec>> {
        let objectives: Vec<Option<TrainObjective>> = expand_axis(&self.objective_axis());
        let schemes: Vec<Option<Scheme>> = expand_axis(&self.axes.scheme);
        let rates: Vec<Option<f64>> = expand_axis(&self.axes.final_rate);
        let classes: Vec<Option<usize>> = expand_axis(&self.axes.classes);
        let seeds: Vec<Option<u64>> = expand_axis(&self.axes.seed);
        if matches!(self.base.dataset, DatasetConfig::File { .. })
            && self.axes.classes.is_some()
        {
            bail!("the classes axis requires a synthetic base dataset");
        }

        let root = self.out_dir();
        let mut specs = Vec::new();
        for objective in &objectives {
            for scheme in &schemes {
                for rate in &rates {
                    for class_count in &classes {
                        for seed in &seeds {
                            let mut train = self.base.train.clone();
                            let mut dataset = self.base.dataset.clone();
                            let mut name = self.name.clone();
                            if let Some(o) = objective {
                                train.objective = *o;
                                name.push_str(&format!("-{}", o.as_str()));
                            }
                            if let Some(s) = scheme {
                                train.schedule.scheme = Some(*s);
                                name.push_str(&format!("-{s:?}").to_lowercase());
                            }
                            if let Some(r) = rate {
                                train.schedule.final_rate = Some(*r);
                                name.push_str(&format!("-f{r}"));
                            }
                            if let Some(c) = class_count {
                                if let DatasetConfig::Synthetic { classes, .. } = &mut dataset {
                                    *classes = *c;
                                }
                                name.push_str(&format!("-c{c}"));
                            }
                            if let Some(s) = seed {
                                train.seed = Some(*s);
                                name.push_str(&format!("-s{s}"));
                            }
                            let resolved = train.resolve(dataset.classes_hint())?;
                            resolved
                                .validate()
                                .map_err(|e| anyhow::anyhow!("invalid grid member {name}: {e}"))?;
                            specs.push(ExperimentSpec {
                                out_dir: root.join(&name),
                                name,
                                dataset,
                                train: resolved,
                            });
                        }
                    }
                }
            }
        }
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != specs.len() {
            bail!("grid expansion produced duplicate names");
        }
        Ok(specs)
    }

    fn objective_axis(&self) -> Option<Vec<TrainObjective>> {
        self.axes.objective.clone()
    }
}

fn expand_axis<T: Clone>(axis: &Option<Vec<T>>) -> Vec<Option<T>> {
    match axis {
        Some(values) => values.iter().cloned().map(Some).collect(),
        None => vec![None],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RUN_TOML: &str = r#"
name = "demo"
[dataset]
kind = "synthetic"
classes = 5
per_class = 40
dim = 2
spread = 0.2
seed = 7
[train]
objective = "elim"
total_epochs = 20
ks = [5, 15]
[train.schedule]
scheme = "linear"
final_rate = 1.0
"#;

    #[test]
    fn run_config_resolves_with_defaults() {
        let cfg: RunConfigFile = toml::from_str(RUN_TOML).unwrap();
        let spec = cfg.resolve().unwrap();
        assert_eq!(spec.name, "demo");
        assert_eq!(spec.train.total_epochs, 20);
        assert_eq!(spec.train.ks, vec![5, 15]);
        assert_eq!(spec.train.batch_m, 64);
        assert_eq!(spec.train.schedule.total_epochs, 20);
        assert_eq!(spec.train.tau, 0.2);
        assert_eq!(spec.out_dir, PathBuf::from("runs/demo"));
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = RUN_TOML.replace("total_epochs = 20", "total_epochss = 20");
        assert!(toml::from_str::<RunConfigFile>(&bad).is_err());
    }

    #[test]
    fn ks_default_follows_synthetic_classes() {
        let trimmed = RUN_TOML.replace("ks = [5, 15]\n", "");
        let cfg: RunConfigFile = toml::from_str(&trimmed).unwrap();
        let spec = cfg.resolve().unwrap();
        assert_eq!(spec.train.ks, vec![5]);
    }

    #[test]
    fn grid_expansion_is_deterministic_cartesian() {
        let toml_text = r#"
name = "ablation"
out_dir = "out/g"
[base.dataset]
kind = "synthetic"
classes = 4
per_class = 10
dim = 2
spread = 0.2
seed = 1
[base.train]
objective = "inst"
total_epochs = 4
[axes]
objective = ["inst", "elim", "attr_oracle"]
classes = [4, 16]
seed = [1, 2]
"#;
        let grid: GridConfigFile = toml::from_str(toml_text).unwrap();
        let specs = grid.expand().unwrap();
        assert_eq!(specs.len(), 12);
        assert_eq!(specs[0].name, "ablation-inst-c4-s1");
        assert_eq!(specs[11].name, "ablation-attr_oracle-c16-s2");
        // classes axis rewrites both the dataset and the default ks
        assert_eq!(specs[6].name, "ablation-elim-c16-s1");
        match &specs[6].dataset {
            DatasetConfig::Synthetic { classes, .. } => assert_eq!(*classes, 16),
            _ => panic!(),
        }
        assert_eq!(specs[6].train.ks, vec![16]);
        let again = grid.expand().unwrap();
        let names: Vec<_> = specs.iter().map(|s| &s.name).collect();
        let names2: Vec<_> = again.iter().map(|s| &s.name).collect();
        assert_eq!(names, names2);
    }

    #[test]
    fn empty_axis_list_gives_empty_grid() {
        let toml_text = r#"
name = "empty"
[base.dataset]
kind = "synthetic"
classes = 3
per_class = 5
dim = 2
spread = 0.1
seed = 1
[base.train]
objective = "inst"
[axes]
seed = []
"#;
        let grid: GridConfigFile = toml::from_str(toml_text).unwrap();
        assert!(grid.expand().unwrap().is_empty());
    }
}
