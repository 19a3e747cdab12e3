//! Contrastive representation learning with incremental false-negative
//! detection.
//!
//! Instance-level contrastive learning repels every non-paired sample from the
//! anchor, including samples that share the anchor's semantic class ("false
//! negatives"). This crate implements a framework that detects those samples
//! by k-means pseudo-labeling, gates the labels by a confidence score whose
//! acceptance rate grows over training, and removes the detected pairs from
//! the contrastive objective, either by eliminating them from the negative set
//! or by attracting them as extra positives.
//!
//! The crate is organized as:
//!
//! - [`embedding`]: row-normalized embedding matrices and the
//!   temperature-scaled similarity kernel,
//! - [`loss`]: the instance / elimination / attraction objectives with
//!   closed-form gradients and per-sample mining coefficients,
//! - [`labeling`]: k-means pseudo-labeling, confidence scoring, and the
//!   acceptance-rate schedules,
//! - [`metrics`]: detection and clustering quality measures (MTPR, MTNR, NMI)
//!   plus a linear probe,
//! - [`nn`]: a small MLP encoder/projector pair with manual backprop,
//! - [`trainer`]: the end-to-end training loop with scheduled label refreshes,
//! - [`dataset`]: synthetic Gaussian-blob datasets and text-format ingestion.
//!
//! All computations are in `f64`. With the default `parallel` feature, hot
//! loops run on rayon; every parallel map is positional and every reduction is
//! sequential, so results are bit-identical across thread counts and with the
//! feature disabled.

pub mod dataset;
pub mod embedding;
pub mod exec;
pub mod labeling;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub(crate) mod seeding;

pub use embedding::{EmbeddingMatrix, Temperature};
pub use labeling::{AcceptanceSchedule, ClusterLevel, PseudoLabelState, Scheme};
pub use loss::{BatchLabels, LossReport, Objective, PseudoLabel, ViewBatch};
pub use metrics::MetricRecord;
pub use trainer::{Dataset, TrainConfig, TrainObjective};
