//! Embedding matrices, row normalization, and the temperature-scaled
//! similarity kernel shared by the losses and the confidence score.
//!
//! Embeddings are L2-normalized once at projection output, so the similarity
//! of two rows reduces to `exp(u·v / tau)`: the cosine form and the raw
//! dot-product form coincide on unit vectors.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

/// Errors from embedding construction, normalization, and the text format.
#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("row {row} has norm below 1e-12 and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("embedding dimensionality must be positive")]
    EmptyDim,
    #[error("value buffer holds {len} entries, expected {rows} x {dim}")]
    ShapeMismatch { len: usize, rows: usize, dim: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("matrix is not row-normalized")]
    NotNormalized,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Temperature hyper-parameter of the similarity kernel; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, EmbeddingError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Temperature(tau))
        } else {
            Err(EmbeddingError::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    /// 0.2, the crate-wide default when a run does not specify one.
    fn default() -> Self {
        Temperature(0.2)
    }
}

/// A rows x dim matrix of embedding vectors, stored row-major in `f64`.
///
/// `normalized` is set only by paths that guarantee unit rows
/// ([`EmbeddingMatrix::normalize_rows`] and the forward pass).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from a row-major buffer, rejecting non-finite values.
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::EmptyDim);
        }
        if values.len() != rows * dim {
            return Err(EmbeddingError::ShapeMismatch {
                len: values.len(),
                rows,
                dim,
            });
        }
        for (i, chunk) in values.chunks(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { row: i });
            }
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, values)
    }

    /// All-zero matrix; used as a gradient accumulator shape.
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dim,
            values: vec![0.0; rows * dim],
            normalized: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Returns a copy with every row divided by its Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Self, EmbeddingError> {
        let mut out = vec![0.0; self.values.len()];
        for (i, (src, dst)) in self
            .values
            .chunks(self.dim)
            .zip(out.chunks_mut(self.dim))
            .enumerate()
        {
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(EmbeddingError::ZeroRow { row: i });
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s / norm;
            }
        }
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            values: out,
            normalized: true,
        })
    }

    /// Serializes as a `rows dim` header line followed by one row per line.
    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{} {}", self.rows, self.dim)?;
        for row in self.values.chunks(self.dim) {
            let mut first = true;
            for v in row {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{v}")?;
                first = false;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parses the text format written by [`EmbeddingMatrix::write_text`].
    pub fn read_text<R: BufRead>(r: R) -> Result<Self, EmbeddingError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(EmbeddingError::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let mut it = header.split_whitespace();
        let rows: usize = parse_field(it.next(), 1, "rows")?;
        let dim: usize = parse_field(it.next(), 1, "dim")?;
        let mut values = Vec::with_capacity(rows * dim);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| EmbeddingError::Parse {
                    line: lineno + 2,
                    msg: format!("bad float {tok:?}"),
                })?;
                values.push(v);
            }
        }
        Self::new(rows, dim, values)
    }
}

fn parse_field<T: std::str::FromStr>(
    tok: Option<&str>,
    line: usize,
    name: &str,
) -> Result<T, EmbeddingError> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| EmbeddingError::Parse {
            line,
            msg: format!("bad or missing {name} in header"),
        })
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `exp(u·v / tau)` for unit vectors `u`, `v`.
pub fn similarity(u: &[f64], v: &[f64], tau: Temperature) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok((dot(u, v) / tau.value()).exp())
}

/// All pairwise similarities of the rows of a normalized matrix.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.data[a * self.n..(a + 1) * self.n]
    }
}

/// Computes `exp(z_a·z_b / tau)` for every row pair; each entry follows the
/// exact floating path of the scalar [`similarity`] call.
pub fn pairwise_similarity(
    m: &EmbeddingMatrix,
    tau: Temperature,
) -> Result<SimilarityMatrix, EmbeddingError> {
    if !m.is_normalized() {
        return Err(EmbeddingError::NotNormalized);
    }
    let n = m.rows();
    let mut data = vec![0.0; n * n];
    exec::fill_rows(&mut data, n, |a, out| {
        let ra = m.row(a);
        for (b, slot) in out.iter_mut().enumerate() {
            *slot = (dot(ra, m.row(b)) / tau.value()).exp();
        }
    });
    Ok(SimilarityMatrix { n, data })
}
