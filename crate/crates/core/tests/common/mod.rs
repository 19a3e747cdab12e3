//! Shared test oracles: naive loss transcriptions and finite differences.
//!
//! Everything here is written directly from the loss definitions over raw
//! dot products, with no shared code path with the library implementation.

use ifnd_core::embedding::EmbeddingMatrix;
use ifnd_core::loss::{BatchLabels, PseudoLabel, ViewBatch};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveObjective {
    Inst,
    Elim,
    Attr,
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn same(labels: &[Option<usize>], a: usize, b: usize) -> bool {
    matches!((labels[a], labels[b]), (Some(x), Some(y)) if x == y)
}

/// Direct transcription of one anchor's loss term, dot-product form.
pub fn naive_anchor_term(
    rows: &[Vec<f64>],
    labels: &[Option<usize>],
    objective: NaiveObjective,
    tau: f64,
    i: usize,
) -> f64 {
    let n = rows.len();
    let partner = if i.is_multiple_of(2) { i + 1 } else { i - 1 };
    let mut s_set = vec![partner];
    let mut p_set = vec![partner];
    for s in 0..n {
        if s == i || s == partner {
            continue;
        }
        match objective {
            NaiveObjective::Inst => s_set.push(s),
            NaiveObjective::Elim => {
                if !same(labels, s, i) {
                    s_set.push(s);
                }
            }
            NaiveObjective::Attr => {
                s_set.push(s);
                if same(labels, s, i) {
                    p_set.push(s);
                }
            }
        }
    }
    let denom: f64 = s_set
        .iter()
        .map(|&s| (dot(&rows[i], &rows[s]) / tau).exp())
        .sum();
    let total: f64 = p_set
        .iter()
        .map(|&p| -((dot(&rows[i], &rows[p]) / tau).exp() / denom).ln())
        .sum();
    total / p_set.len() as f64
}

/// Mean loss over all anchors, the quantity the library reports as `value`.
pub fn naive_mean_loss(
    rows: &[Vec<f64>],
    labels: &[Option<usize>],
    objective: NaiveObjective,
    tau: f64,
) -> f64 {
    let n = rows.len();
    (0..n)
        .map(|i| naive_anchor_term(rows, labels, objective, tau, i))
        .sum::<f64>()
        / n as f64
}

/// Supervised-contrastive transcription ("out" variant): positives are every
/// other view of the same class, denominator is every other view.
pub fn supcon_mean_loss(rows: &[Vec<f64>], classes: &[usize], tau: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && classes[p] == classes[i]).collect();
        assert!(!positives.is_empty(), "every view needs a same-class partner");
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (dot(&rows[i], &rows[a]) / tau).exp())
            .sum();
        let inner: f64 = positives
            .iter()
            .map(|&p| -((dot(&rows[i], &rows[p]) / tau).exp() / denom).ln())
            .sum();
        total += inner / positives.len() as f64;
    }
    total / n as f64
}

/// Central finite difference of the mean loss with respect to every
/// coordinate of every view, perturbing the post-normalization embedding.
pub fn fd_total_grad(
    rows: &[Vec<f64>],
    labels: &[Option<usize>],
    objective: NaiveObjective,
    tau: f64,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut grad = vec![vec![0.0; rows[0].len()]; rows.len()];
    let mut work = rows.to_vec();
    for v in 0..rows.len() {
        for k in 0..rows[0].len() {
            let orig = work[v][k];
            work[v][k] = orig + h;
            let plus = naive_mean_loss(&work, labels, objective, tau);
            work[v][k] = orig - h;
            let minus = naive_mean_loss(&work, labels, objective, tau);
            work[v][k] = orig;
            grad[v][k] = (plus - minus) / (2.0 * h);
        }
    }
    grad
}

/// Central finite difference of anchor i's own term with respect to `z_i`.
pub fn fd_anchor_grad(
    rows: &[Vec<f64>],
    labels: &[Option<usize>],
    objective: NaiveObjective,
    tau: f64,
    h: f64,
    i: usize,
) -> Vec<f64> {
    let mut work = rows.to_vec();
    let mut grad = vec![0.0; rows[0].len()];
    for k in 0..rows[0].len() {
        let orig = work[i][k];
        work[i][k] = orig + h;
        let plus = naive_anchor_term(&work, labels, objective, tau, i);
        work[i][k] = orig - h;
        let minus = naive_anchor_term(&work, labels, objective, tau, i);
        work[i][k] = orig;
        grad[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// |a - b| within a relative tolerance with an absolute floor.
pub fn close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= floor.max(rel * a.abs().max(b.abs()))
}

pub fn unit_rows(m: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * m)
        .map(|_| {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / norm).collect()
        })
        .collect()
}

pub fn to_batch(rows: &[Vec<f64>]) -> ViewBatch {
    let m = EmbeddingMatrix::from_rows(rows)
        .unwrap()
        .normalize_rows()
        .unwrap();
    ViewBatch::new(m).unwrap()
}

/// Builds per-view labels for the library and the oracle from one label per
/// source image.
pub fn source_labels(per_source: &[Option<usize>]) -> (BatchLabels, Vec<Option<usize>>) {
    let as_pseudo: Vec<PseudoLabel> = per_source
        .iter()
        .map(|l| match l {
            Some(c) => PseudoLabel::Assigned(*c),
            None => PseudoLabel::Singleton,
        })
        .collect();
    let mut per_view = Vec::with_capacity(per_source.len() * 2);
    for l in per_source {
        per_view.push(*l);
        per_view.push(*l);
    }
    (BatchLabels::from_sources(&as_pseudo), per_view)
}
