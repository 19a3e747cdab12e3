//! End-to-end training: minibatch SGD on a contrastive objective with
//! scheduled pseudo-label refreshes.
//!
//! Every sample starts as its own instance. Each epoch runs minibatch SGD on
//! the configured objective with the current pseudo-label state projected
//! onto each batch; on refresh epochs the encoder features of the whole
//! dataset are clustered, confidences scored, and the acceptance-rate
//! schedule decides how many cluster labels are adopted for the following
//! epochs. A metric record (MTPR, MTNR, NMI, epoch loss, linear-probe
//! accuracy) is appended at every refresh.
//!
//! Determinism: every random stream (shuffling, augmentation, clustering
//! restarts, probe split) is derived from the run seed and the epoch index,
//! so identical configs replay bit-identically and a resumed run continues
//! exactly where the checkpoint left off.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::embedding::{EmbeddingError, EmbeddingMatrix, Temperature};
use crate::labeling::{
    refresh, AcceptanceSchedule, KmeansOptions, LabelingError, PseudoLabelState, RefreshConfig,
};
use crate::loss::{
    hierarchical_loss, loss_attr, loss_elim, loss_inst, BatchLabels, LossError, LossReport,
    Objective, PseudoLabel, ViewBatch,
};
use crate::metrics::{linear_probe, mtnr, mtpr, nmi, LabeledSet, MetricRecord, MetricsError};
use crate::nn::{backward, forward, EncoderParams, NnError, ParamGrads};
use crate::seeding::{self, stream};

pub use crate::dataset::Dataset;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Labeling(#[from] LabelingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training objective. The first three are self-supervised; `AttrOracle`
/// feeds ground-truth classes to the attraction loss and serves as the
/// supervised upper-reference in the false-negative effect study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainObjective {
    Inst,
    Elim,
    Attr,
    AttrOracle,
}

impl TrainObjective {
    pub fn uses_pseudo_labels(self) -> bool {
        matches!(self, TrainObjective::Elim | TrainObjective::Attr)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainObjective::Inst => "inst",
            TrainObjective::Elim => "elim",
            TrainObjective::Attr => "attr",
            TrainObjective::AttrOracle => "attr_oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Constant,
    Cosine,
}

/// View synthesis: per-view scaling jitter in [0.8, 1.2] plus additive
/// Gaussian noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.1,
            scale_jitter: true,
        }
    }
}

/// Linear-probe evaluation settings used for the per-refresh metric record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_fraction: 0.8,
            epochs: 100,
            learning_rate: 0.5,
        }
    }
}

// scalar fields first so the TOML config echo serializes cleanly
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub batch_m: usize,
    pub tau: f64,
    pub objective: TrainObjective,
    pub ks: Vec<usize>,
    pub refresh_cadence: usize,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub momentum: f64,
    pub seed: u64,
    pub encoder_widths: Vec<usize>,
    pub projector_widths: Vec<usize>,
    pub schedule: AcceptanceSchedule,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Temperature, TrainerError> {
        let tau = Temperature::new(self.tau)
            .map_err(|e| TrainerError::InvalidConfig(e.to_string()))?;
        if self.total_epochs == 0 {
            return Err(TrainerError::InvalidConfig("total_epochs must be > 0".into()));
        }
        if self.batch_m < 2 {
            return Err(TrainerError::InvalidConfig(
                "batch_m must be >= 2 so every anchor has negatives".into(),
            ));
        }
        if self.ks.is_empty() {
            return Err(TrainerError::InvalidConfig(
                "ks needs at least one cluster count (the first one feeds the metrics)".into(),
            ));
        }
        if self.refresh_cadence == 0 {
            return Err(TrainerError::InvalidConfig("refresh_cadence must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainerError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainerError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return Err(TrainerError::InvalidConfig(
                "probe.train_fraction must be in (0, 1)".into(),
            ));
        }
        if self.augment.noise_sigma < 0.0 || !self.augment.noise_sigma.is_finite() {
            return Err(TrainerError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(tau)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => {
                let progress = epoch as f64 / self.total_epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Two independent augmented views of one sample.
pub fn augment(sample: &[f64], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let view = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let scale = if cfg.scale_jitter {
            rng.random_range(0.8..1.2)
        } else {
            1.0
        };
        sample
            .iter()
            .map(|&x| {
                let noise: f64 = rng.sample(StandardNormal);
                scale * x + cfg.noise_sigma * noise
            })
            .collect()
    };
    let a = view(rng);
    let b = view(rng);
    (a, b)
}

/// Final model, per-refresh metric records, and the last published label
/// state.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub velocity: Option<ParamGrads>,
    pub records: Vec<MetricRecord>,
    pub state: PseudoLabelState,
    pub epochs_completed: usize,
}

impl TrainOutput {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epochs_completed: self.epochs_completed,
            params: self.params.clone(),
            velocity: self.velocity.clone(),
            state: self.state.clone(),
        }
    }
}

/// Versioned checkpoint: parameters, optimizer state, label state, and the
/// number of completed epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epochs_completed: usize,
    pub params: EncoderParams,
    pub velocity: Option<ParamGrads>,
    pub state: PseudoLabelState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainerError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TrainerError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TrainerError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Trains from scratch; see [`train_from`] for resuming.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput, TrainerError> {
    train_segment(dataset, config, None, None)
}

/// Runs the training loop, optionally resuming from a checkpoint taken at an
/// epoch boundary. Because all random streams are derived per epoch, a
/// resumed run replays the remaining epochs exactly as an uninterrupted run
/// would.
pub fn train_from(
    dataset: &Dataset,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutput, TrainerError> {
    train_segment(dataset, config, resume, None)
}

/// As [`train_from`], but optionally stops after `stop_after` epochs while
/// keeping the full schedules (learning rate, acceptance) anchored to
/// `config.total_epochs`, so the run can be checkpointed and continued later.
pub fn train_segment(
    dataset: &Dataset,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<TrainOutput, TrainerError> {
    let tau = config.validate()?;
    if dataset.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let n = dataset.len();

    let (mut params, mut velocity, mut state, start_epoch) = match resume {
        Some(ck) => {
            if ck.epochs_completed > config.total_epochs {
                return Err(TrainerError::Checkpoint(format!(
                    "checkpoint has {} completed epochs, config trains {}",
                    ck.epochs_completed, config.total_epochs
                )));
            }
            (ck.params, ck.velocity, ck.state, ck.epochs_completed)
        }
        None => {
            let params = EncoderParams::init(
                dataset.samples.dim(),
                &config.encoder_widths,
                &config.projector_widths,
                config.seed,
            );
            let velocity = if config.momentum > 0.0 {
                Some(ParamGrads::zeros_like(&params))
            } else {
                None
            };
            // instance-level at the beginning: every sample is its own label
            let state = PseudoLabelState::all_singleton(n, &config.ks);
            (params, velocity, state, 0)
        }
    };

    let refresh_cfg = RefreshConfig {
        ks: config.ks.clone(),
        tau,
        schedule: config.schedule,
        kmeans: KmeansOptions {
            seed: config.seed,
            ..KmeansOptions::default()
        },
    };
    let (probe_train, probe_test) = probe_split(n, config);
    let end_epoch = stop_after
        .map(|s| s.min(config.total_epochs))
        .unwrap_or(config.total_epochs);

    let mut records = Vec::new();
    for epoch in start_epoch..end_epoch {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeding::derive(config.seed, &[stream::EPOCH, epoch as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_m) {
            if chunk.len() < 2 {
                continue;
            }
            let report = train_step(
                dataset, config, tau, &state, chunk, &mut rng, &mut params, &mut velocity, lr,
            )?;
            if !report.value.is_finite() {
                return Err(TrainerError::NonFiniteLoss { epoch });
            }
            loss_sum += report.value;
            batches += 1;
        }
        let epoch_loss = if batches > 0 {
            loss_sum / batches as f64
        } else {
            0.0
        };

        if epoch % config.refresh_cadence == 0 {
            let record = refresh_and_measure(
                dataset,
                config,
                &refresh_cfg,
                &mut state,
                epoch,
                epoch_loss,
                &params,
                &probe_train,
                &probe_test,
            )?;
            records.push(record);
        }
    }

    Ok(TrainOutput {
        params,
        velocity,
        records,
        state,
        epochs_completed: end_epoch,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    dataset: &Dataset,
    config: &TrainConfig,
    tau: Temperature,
    state: &PseudoLabelState,
    chunk: &[usize],
    rng: &mut ChaCha8Rng,
    params: &mut EncoderParams,
    velocity: &mut Option<ParamGrads>,
    lr: f64,
) -> Result<LossReport, TrainerError> {
    let dim = dataset.samples.dim();
    let mut view_values = Vec::with_capacity(chunk.len() * 2 * dim);
    for &src in chunk {
        let (a, b) = augment(dataset.samples.row(src), &config.augment, rng);
        view_values.extend_from_slice(&a);
        view_values.extend_from_slice(&b);
    }
    let views = EmbeddingMatrix::new(chunk.len() * 2, dim, view_values)?;
    let fwd = forward(params, &views)?;
    let batch = ViewBatch::new(fwd.embeddings.clone())?;

    let report = match config.objective {
        TrainObjective::Inst => loss_inst(&batch, tau)?,
        TrainObjective::Elim | TrainObjective::Attr => {
            let objective = if config.objective == TrainObjective::Elim {
                Objective::Elim
            } else {
                Objective::Attr
            };
            let levels: Vec<BatchLabels> = (0..config.ks.len())
                .map(|l| state.batch_labels(l, chunk))
                .collect();
            if levels.len() == 1 {
                match objective {
                    Objective::Elim => loss_elim(&batch, &levels[0], tau)?,
                    Objective::Attr => loss_attr(&batch, &levels[0], tau)?,
                    Objective::Inst => unreachable!(),
                }
            } else {
                hierarchical_loss(&batch, &levels, objective, tau)?
            }
        }
        TrainObjective::AttrOracle => {
            let classes: Vec<usize> = chunk.iter().map(|&s| dataset.true_label[s]).collect();
            let labels = BatchLabels::from_source_classes(&classes);
            loss_attr(&batch, &labels, tau)?
        }
    };

    let grads = backward(params, &fwd, &report.grad)?;
    sgd_step(params, velocity, &grads, lr, config.momentum);
    Ok(report)
}

fn sgd_step(
    params: &mut EncoderParams,
    velocity: &mut Option<ParamGrads>,
    grads: &ParamGrads,
    lr: f64,
    momentum: f64,
) {
    let apply = |p: &mut [f64], g: &[f64], v: Option<&mut Vec<f64>>| match v {
        Some(vel) => {
            for ((pv, gv), vv) in p.iter_mut().zip(g).zip(vel.iter_mut()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        None => {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    };
    for (li, layer) in params.encoder.iter_mut().enumerate() {
        let vel = velocity.as_mut().map(|v| &mut v.encoder[li]);
        match vel {
            Some(v) => {
                apply(&mut layer.weights, &grads.encoder[li].weights, Some(&mut v.weights));
                apply(&mut layer.bias, &grads.encoder[li].bias, Some(&mut v.bias));
            }
            None => {
                apply(&mut layer.weights, &grads.encoder[li].weights, None);
                apply(&mut layer.bias, &grads.encoder[li].bias, None);
            }
        }
    }
    for (li, layer) in params.projector.iter_mut().enumerate() {
        let vel = velocity.as_mut().map(|v| &mut v.projector[li]);
        match vel {
            Some(v) => {
                apply(&mut layer.weights, &grads.projector[li].weights, Some(&mut v.weights));
                apply(&mut layer.bias, &grads.projector[li].bias, Some(&mut v.bias));
            }
            None => {
                apply(&mut layer.weights, &grads.projector[li].weights, None);
                apply(&mut layer.bias, &grads.projector[li].bias, None);
            }
        }
    }
}

fn probe_split(n: usize, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seeding::derive(config.seed, &[stream::PROBE_SPLIT]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let cut = ((config.probe.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train = order[..cut].to_vec();
    let test = order[cut..].to_vec();
    (train, test)
}

/// Clusters the current encoder features, publishes the new label state when
/// the objective consumes pseudo labels, and assembles the metric record.
///
/// MTPR/MTNR are measured on the labels the objective actually trains with:
/// the accepted labels of the first level for the pseudo-label objectives,
/// all-singleton for instance-level learning, and the ground-truth classes
/// for the oracle. NMI always compares the raw first-level clustering to the
/// ground truth.
#[allow(clippy::too_many_arguments)]
fn refresh_and_measure(
    dataset: &Dataset,
    config: &TrainConfig,
    refresh_cfg: &RefreshConfig,
    state: &mut PseudoLabelState,
    epoch: usize,
    epoch_loss: f64,
    params: &EncoderParams,
    probe_train: &[usize],
    probe_test: &[usize],
) -> Result<MetricRecord, TrainerError> {
    let fwd = forward(params, &dataset.samples)?;
    let features = fwd.features.normalize_rows()?;

    let candidate = if config.objective.uses_pseudo_labels() {
        let new_state = refresh(&features, refresh_cfg, epoch)?;
        *state = new_state;
        state.clone()
    } else {
        // metrics-only clustering at the first granularity
        let metric_cfg = RefreshConfig {
            ks: vec![config.ks[0]],
            ..refresh_cfg.clone()
        };
        refresh(&features, &metric_cfg, epoch)?
    };

    let detected: Vec<PseudoLabel> = match config.objective {
        TrainObjective::Inst => vec![PseudoLabel::Singleton; dataset.len()],
        TrainObjective::AttrOracle => dataset
            .true_label
            .iter()
            .map(|&c| PseudoLabel::Assigned(c))
            .collect(),
        TrainObjective::Elim | TrainObjective::Attr => state.levels[0].accepted.clone(),
    };
    let set = LabeledSet::new(dataset.true_label.clone(), detected)?;
    let nmi_value = nmi(&dataset.true_label, &candidate.levels[0].assignment)?;

    let gather = |idx: &[usize]| -> (EmbeddingMatrix, Vec<usize>) {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| features.row(i).to_vec()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.true_label[i]).collect();
        (
            EmbeddingMatrix::from_rows(&rows).expect("finite features"),
            labels,
        )
    };
    let (tr_emb, tr_lab) = gather(probe_train);
    let (te_emb, te_lab) = gather(probe_test);
    let probe_acc = linear_probe(
        &tr_emb,
        &tr_lab,
        &te_emb,
        &te_lab,
        config.probe.epochs,
        config.probe.learning_rate,
    )?;

    Ok(MetricRecord {
        epoch,
        mtpr: mtpr(&set).value,
        mtnr: mtnr(&set).value,
        nmi: nmi_value,
        loss: epoch_loss,
        probe_acc,
    })
}
