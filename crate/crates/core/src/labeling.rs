//! Pseudo-label assignment: k-means over encoder features, a per-sample
//! confidence score, and the acceptance-rate schedules that decide which
//! cluster labels are adopted at each epoch.
//!
//! The confidence of sample `i` with assignment `y_i` is the softmax of
//! temperature-scaled similarities between the sample and every centroid,
//! evaluated at the assigned one: it grows when the sample sits close to its
//! own centroid and far from the others. At a given rate `r`, exactly
//! `ceil(r * N)` samples with the highest confidence keep their cluster label
//! per level; everyone else falls back to the singleton sentinel.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingMatrix, Temperature};
use crate::exec;
use crate::loss::PseudoLabel;
use crate::seeding::{self, stream};

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("k-means needs at least k samples: rows {rows} < k {k}")]
    TooFewSamples { rows: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("empty cluster could not be repaired in any restart")]
    EmptyClusterUnrecoverable,
    #[error("cluster level does not match the feature matrix: {0}")]
    LevelMismatch(String),
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("acceptance rate {0} outside [0, 1]")]
    InvalidRate(f64),
    #[error("schedule needs at least one epoch")]
    EmptySchedule,
}

/// One k-means granularity: centroids, per-sample assignment and confidence,
/// and the final within-cluster sum of squared distances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterLevel {
    pub k: usize,
    pub centroids: EmbeddingMatrix,
    pub assignment: Vec<usize>,
    pub confidence: Vec<f64>,
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KmeansOptions {
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions {
            seed: 0,
            max_iters: 100,
            restarts: 3,
        }
    }
}

struct LloydRun {
    centroids: Vec<f64>,
    assignment: Vec<usize>,
    inertia: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closest centroid by squared distance, ties broken by lowest index.
fn assign_one(point: &[f64], centroids: &[f64], k: usize, dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..k {
        let d = squared_distance(point, &centroids[j * dim..(j + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

fn kmeans_plus_plus_init(
    features: &EmbeddingMatrix,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = features.rows();
    let dim = features.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(features.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), features.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let choice = if total > 0.0 {
            let weights = WeightedIndex::new(&dist).expect("positive total weight");
            weights.sample(rng)
        } else {
            // all remaining points coincide with a chosen centroid
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(features.row(choice));
        for (i, slot) in dist.iter_mut().enumerate() {
            let d = squared_distance(features.row(i), &centroids[c * dim..(c + 1) * dim]);
            if d < *slot {
                *slot = d;
            }
        }
    }
    centroids
}

/// One Lloyd sweep: assign every point, then move centroids to their cluster
/// means, reseeding empty clusters to the point farthest from its centroid.
/// Returns the assignment and the inertia measured at the start of the sweep.
pub(crate) fn lloyd_iteration(
    features: &EmbeddingMatrix,
    centroids: &mut [f64],
    k: usize,
) -> (Vec<usize>, f64) {
    let n = features.rows();
    let dim = features.dim();
    let assign: Vec<(usize, f64)> =
        exec::map_indexed(n, |i| assign_one(features.row(i), centroids, k, dim));
    let mut assignment: Vec<usize> = assign.iter().map(|&(j, _)| j).collect();
    let inertia: f64 = assign.iter().map(|&(_, d)| d).sum();

    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * dim];
    for (i, &j) in assignment.iter().enumerate() {
        counts[j] += 1;
        for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let mut stolen: Vec<usize> = Vec::new();
    for j in 0..k {
        if counts[j] > 0 {
            for (c, s) in centroids[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&sums[j * dim..(j + 1) * dim])
            {
                *c = s / counts[j] as f64;
            }
        } else {
            // farthest point from its assigned centroid, skipping points
            // already claimed by another empty cluster this sweep
            let mut far = usize::MAX;
            let mut far_d = -1.0;
            for (i, &(_, d)) in assign.iter().enumerate() {
                if stolen.contains(&i) {
                    continue;
                }
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            if far != usize::MAX {
                centroids[j * dim..(j + 1) * dim].copy_from_slice(features.row(far));
                assignment[far] = j;
                stolen.push(far);
            }
        }
    }
    (assignment, inertia)
}

fn lloyd(features: &EmbeddingMatrix, k: usize, seed: u64, max_iters: usize) -> Option<LloydRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus_init(features, k, &mut rng);
    let n = features.rows();
    let dim = features.dim();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let (next, _) = lloyd_iteration(features, &mut centroids, k);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    // final assignment and inertia against the converged centroids
    let finals: Vec<(usize, f64)> =
        exec::map_indexed(n, |i| assign_one(features.row(i), &centroids, k, dim));
    let assignment: Vec<usize> = finals.iter().map(|&(j, _)| j).collect();
    let inertia: f64 = finals.iter().map(|&(_, d)| d).sum();
    let mut seen = vec![false; k];
    for &j in &assignment {
        seen[j] = true;
    }
    if seen.iter().all(|&s| s) {
        Some(LloydRun {
            centroids,
            assignment,
            inertia,
        })
    } else {
        None
    }
}

/// Lloyd's algorithm from k-means++ seeding; the lowest-inertia run over
/// `opts.restarts` attempts wins. Confidence is filled from `tau` so the
/// returned level is complete.
pub fn kmeans(
    features: &EmbeddingMatrix,
    k: usize,
    tau: Temperature,
    opts: &KmeansOptions,
) -> Result<ClusterLevel, LabelingError> {
    if k == 0 {
        return Err(LabelingError::ZeroClusters);
    }
    if features.rows() < k {
        return Err(LabelingError::TooFewSamples {
            rows: features.rows(),
            k,
        });
    }
    let mut best: Option<LloydRun> = None;
    for r in 0..opts.restarts.max(1) {
        let seed = seeding::derive(opts.seed, &[stream::KMEANS, r as u64]);
        if let Some(run) = lloyd(features, k, seed, opts.max_iters) {
            let better = best
                .as_ref()
                .map(|b| run.inertia < b.inertia)
                .unwrap_or(true);
            if better {
                best = Some(run);
            }
        }
    }
    let run = best.ok_or(LabelingError::EmptyClusterUnrecoverable)?;
    let centroids = EmbeddingMatrix::new(k, features.dim(), run.centroids)
        .expect("finite centroids");
    let mut level = ClusterLevel {
        k,
        centroids,
        assignment: run.assignment,
        confidence: Vec::new(),
        inertia: run.inertia,
    };
    level.confidence = confidence(features, &level, tau)?;
    Ok(level)
}

/// Per-sample confidence: the softmax over centroids of temperature-scaled
/// similarities, evaluated at the assigned centroid. Centroids are
/// renormalized to unit length first so the kernel lives on the sphere.
pub fn confidence(
    features: &EmbeddingMatrix,
    level: &ClusterLevel,
    tau: Temperature,
) -> Result<Vec<f64>, LabelingError> {
    if level.centroids.dim() != features.dim() {
        return Err(LabelingError::LevelMismatch(format!(
            "centroid dim {} vs feature dim {}",
            level.centroids.dim(),
            features.dim()
        )));
    }
    if level.assignment.len() != features.rows() {
        return Err(LabelingError::LevelMismatch(format!(
            "assignment covers {} samples, features have {}",
            level.assignment.len(),
            features.rows()
        )));
    }
    let k = level.k;
    let dim = features.dim();
    // a zero-norm centroid (possible with antipodal members) is left raw
    let mut unit = level.centroids.values().to_vec();
    for row in unit.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let tau_v = tau.value();
    Ok(exec::map_indexed(features.rows(), |i| {
        let x = features.row(i);
        let sims: Vec<f64> = (0..k)
            .map(|j| (dot(x, &unit[j * dim..(j + 1) * dim]) / tau_v).exp())
            .collect();
        let total: f64 = sims.iter().sum();
        sims[level.assignment[i]] / total
    }))
}

/// How the label acceptance rate evolves over training epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Constant,
    Step,
    Linear,
}

/// Acceptance-rate schedule. `Constant` holds `final_rate` throughout,
/// `Step` jumps from `initial_rate` to `final_rate` at `step_epoch`, and
/// `Linear` interpolates from `initial_rate` at epoch 0 to `final_rate` at
/// `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSchedule {
    pub scheme: Scheme,
    pub initial_rate: f64,
    pub final_rate: f64,
    #[serde(default)]
    pub step_epoch: usize,
    pub total_epochs: usize,
}

impl AcceptanceSchedule {
    pub fn new(
        scheme: Scheme,
        initial_rate: f64,
        final_rate: f64,
        step_epoch: usize,
        total_epochs: usize,
    ) -> Result<Self, LabelingError> {
        for r in [initial_rate, final_rate] {
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(LabelingError::InvalidRate(r));
            }
        }
        if total_epochs == 0 {
            return Err(LabelingError::EmptySchedule);
        }
        Ok(AcceptanceSchedule {
            scheme,
            initial_rate,
            final_rate,
            step_epoch,
            total_epochs,
        })
    }

    pub fn rate_at(&self, epoch: usize) -> Result<f64, LabelingError> {
        if epoch > self.total_epochs {
            return Err(LabelingError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        Ok(match self.scheme {
            Scheme::Constant => self.final_rate,
            Scheme::Step => {
                if epoch >= self.step_epoch {
                    self.final_rate
                } else {
                    self.initial_rate
                }
            }
            Scheme::Linear => {
                self.initial_rate
                    + (epoch as f64 / self.total_epochs as f64)
                        * (self.final_rate - self.initial_rate)
            }
        })
    }

    /// Human-readable descriptor, e.g. `linear 0->1` or `step@100 0->1`.
    pub fn describe(&self) -> String {
        match self.scheme {
            Scheme::Constant => format!("constant {}", self.final_rate),
            Scheme::Step => format!(
                "step@{} {}->{}",
                self.step_epoch, self.initial_rate, self.final_rate
            ),
            Scheme::Linear => format!("linear {}->{}", self.initial_rate, self.final_rate),
        }
    }
}

/// Keeps the `ceil(rate * N)` highest-confidence cluster labels; everyone
/// else becomes a singleton. Confidence ties accept the lower sample index.
pub fn accept_labels(level: &ClusterLevel, rate: f64) -> Vec<PseudoLabel> {
    let n = level.assignment.len();
    let take = (rate * n as f64).ceil().min(n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        level.confidence[b]
            .partial_cmp(&level.confidence[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut labels = vec![PseudoLabel::Singleton; n];
    for &i in order.iter().take(take) {
        labels[i] = PseudoLabel::Assigned(level.assignment[i]);
    }
    labels
}

/// Accepted labels for one granularity level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelLabels {
    pub k: usize,
    pub accepted: Vec<PseudoLabel>,
    pub kappa: Vec<f64>,
    pub assignment: Vec<usize>,
}

/// Pseudo-label state published to the trainer after a refresh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelState {
    pub levels: Vec<LevelLabels>,
    pub epoch: usize,
    pub rate: f64,
}

impl PseudoLabelState {
    /// Initial state: every sample is its own instance at every level.
    pub fn all_singleton(samples: usize, ks: &[usize]) -> Self {
        PseudoLabelState {
            levels: ks
                .iter()
                .map(|&k| LevelLabels {
                    k,
                    accepted: vec![PseudoLabel::Singleton; samples],
                    kappa: vec![0.0; samples],
                    assignment: vec![0; samples],
                })
                .collect(),
            epoch: 0,
            rate: 0.0,
        }
    }

    pub fn samples(&self) -> usize {
        self.levels.first().map(|l| l.accepted.len()).unwrap_or(0)
    }

    /// Projects the accepted labels of one level onto a batch of source ids.
    pub fn batch_labels(&self, level: usize, source_ids: &[usize]) -> crate::loss::BatchLabels {
        let per_source: Vec<PseudoLabel> = source_ids
            .iter()
            .map(|&s| self.levels[level].accepted[s])
            .collect();
        crate::loss::BatchLabels::from_sources(&per_source)
    }

    /// Structured text record: a header, then per level the cluster count,
    /// accepted labels (`*` marks a singleton), confidences, and raw
    /// assignment.
    pub fn write_text<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "pseudo-label-state epoch {} rate {} levels {}",
            self.epoch,
            self.rate,
            self.levels.len()
        )?;
        for level in &self.levels {
            writeln!(w, "level k {}", level.k)?;
            let labels: Vec<String> = level
                .accepted
                .iter()
                .map(|l| match l {
                    PseudoLabel::Assigned(c) => c.to_string(),
                    PseudoLabel::Singleton => "*".to_string(),
                })
                .collect();
            writeln!(w, "labels {}", labels.join(" "))?;
            let kappa: Vec<String> = level.kappa.iter().map(|v| v.to_string()).collect();
            writeln!(w, "kappa {}", kappa.join(" "))?;
            let assign: Vec<String> = level.assignment.iter().map(|v| v.to_string()).collect();
            writeln!(w, "assignment {}", assign.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: std::io::BufRead>(r: R) -> std::io::Result<Self> {
        use std::io::{Error, ErrorKind};
        let bad = |msg: &str| Error::new(ErrorKind::InvalidData, msg.to_string());
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("missing header"))??;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 7 || toks[0] != "pseudo-label-state" {
            return Err(bad("malformed header"));
        }
        let epoch = toks[2].parse().map_err(|_| bad("bad epoch"))?;
        let rate = toks[4].parse().map_err(|_| bad("bad rate"))?;
        let n_levels: usize = toks[6].parse().map_err(|_| bad("bad level count"))?;
        let mut levels = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let kline = lines.next().ok_or_else(|| bad("missing level header"))??;
            let k = kline
                .strip_prefix("level k ")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad level header"))?;
            let labels_line = lines.next().ok_or_else(|| bad("missing labels"))??;
            let accepted = labels_line
                .strip_prefix("labels")
                .ok_or_else(|| bad("bad labels line"))?
                .split_whitespace()
                .map(|t| {
                    if t == "*" {
                        Ok(PseudoLabel::Singleton)
                    } else {
                        t.parse().map(PseudoLabel::Assigned).map_err(|_| bad("bad label"))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let kappa_line = lines.next().ok_or_else(|| bad("missing kappa"))??;
            let kappa = kappa_line
                .strip_prefix("kappa")
                .ok_or_else(|| bad("bad kappa line"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad kappa")))
                .collect::<Result<Vec<f64>, _>>()?;
            let assign_line = lines.next().ok_or_else(|| bad("missing assignment"))??;
            let assignment = assign_line
                .strip_prefix("assignment")
                .ok_or_else(|| bad("bad assignment line"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad assignment")))
                .collect::<Result<Vec<usize>, _>>()?;
            levels.push(LevelLabels {
                k,
                accepted,
                kappa,
                assignment,
            });
        }
        Ok(PseudoLabelState {
            levels,
            epoch,
            rate,
        })
    }
}

/// Clustering, confidence, and acceptance parameters for a refresh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefreshConfig {
    pub ks: Vec<usize>,
    pub tau: Temperature,
    pub schedule: AcceptanceSchedule,
    pub kmeans: KmeansOptions,
}

/// Runs k-means, confidence scoring, and acceptance independently per level;
/// the acceptance rate is shared across levels at a given epoch. Each level
/// gets its own derived seed so repeated calls are identical.
pub fn refresh(
    features: &EmbeddingMatrix,
    cfg: &RefreshConfig,
    epoch: usize,
) -> Result<PseudoLabelState, LabelingError> {
    let rate = cfg.schedule.rate_at(epoch)?;
    let mut levels = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let opts = KmeansOptions {
            seed: seeding::derive(cfg.kmeans.seed, &[stream::KMEANS, k as u64, epoch as u64]),
            ..cfg.kmeans
        };
        let level = kmeans(features, k, cfg.tau, &opts)?;
        let accepted = accept_labels(&level, rate);
        levels.push(LevelLabels {
            k,
            accepted,
            kappa: level.confidence,
            assignment: level.assignment,
        });
    }
    Ok(PseudoLabelState {
        levels,
        epoch,
        rate,
    })
}
