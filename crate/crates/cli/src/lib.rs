//! Experiment harness: config files, dataset loading, single runs, ablation
//! grids, and embedding dumps over the `ifnd-core` trainer.

pub mod config;
pub mod experiment;
pub mod pca;
