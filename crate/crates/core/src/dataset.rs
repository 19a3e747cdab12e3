//! Datasets: synthetic Gaussian blobs and text-format ingestion.

use std::io::BufRead;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::embedding::{EmbeddingMatrix, EmbeddingError};
use crate::seeding::{self, stream};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{samples} samples but {labels} labels")]
    LengthMismatch { samples: usize, labels: usize },
    #[error("label parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw feature vectors with ground-truth class ids. The class ids only feed
/// evaluation metrics and the oracle objective; the self-supervised paths
/// never read them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: EmbeddingMatrix,
    pub true_label: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: EmbeddingMatrix, true_label: Vec<usize>) -> Result<Self, DatasetError> {
        if samples.rows() != true_label.len() {
            return Err(DatasetError::LengthMismatch {
                samples: samples.rows(),
                labels: true_label.len(),
            });
        }
        Ok(Dataset {
            samples,
            true_label,
        })
    }

    pub fn len(&self) -> usize {
        self.true_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_label.is_empty()
    }

    pub fn class_count(&self) -> usize {
        let mut c = self.true_label.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    }

    /// Reads the embedding text format plus a parallel label file with one
    /// integer per line.
    pub fn read_files(features: &Path, labels: &Path) -> Result<Self, DatasetError> {
        let f = std::io::BufReader::new(std::fs::File::open(features)?);
        let samples = EmbeddingMatrix::read_text(f)?;
        let l = std::io::BufReader::new(std::fs::File::open(labels)?);
        let mut true_label = Vec::new();
        for (i, line) in l.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            true_label.push(t.parse().map_err(|_| DatasetError::Parse {
                line: i + 1,
                msg: format!("bad label {t:?}"),
            })?);
        }
        Dataset::new(samples, true_label)
    }

    pub fn write_files(&self, features: &Path, labels: &Path) -> Result<(), DatasetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(features)?);
        self.samples.write_text(&mut f)?;
        let mut l = std::io::BufWriter::new(std::fs::File::create(labels)?);
        use std::io::Write;
        for t in &self.true_label {
            writeln!(l, "{t}")?;
        }
        Ok(())
    }
}

/// Gaussian blobs: class means drawn uniformly on the unit sphere, samples
/// spread around them with isotropic standard deviation `spread`. Samples are
/// laid out class-major and the generator is deterministic under `seed`.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    assert!(classes >= 1 && per_class >= 1 && dim >= 2, "degenerate blob spec");
    assert!(spread >= 0.0 && spread.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[stream::BLOBS]));
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        loop {
            let m: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                means.push(m.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
                break;
            }
        }
    }
    let mut values = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                values.push(m + spread * noise);
            }
            labels.push(c);
        }
    }
    let samples =
        EmbeddingMatrix::new(classes * per_class, dim, values).expect("finite blob samples");
    Dataset::new(samples, labels).expect("consistent blob dataset")
}
