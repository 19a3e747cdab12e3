//! Contrastive objectives over paired-view batches: the instance-level loss,
//! the false-negative elimination loss, and the false-negative attraction
//! loss, with analytic gradients and per-sample mining coefficients.
//!
//! A batch holds `2M` views of `M` source images, paired as `(2j, 2j+1)`.
//! Every view acts as the anchor once. For anchor `i` with partner `i'`:
//!
//! - instance: denominator set `S(i)` is every other view, positives `{i'}`;
//! - elimination: views sharing the anchor's pseudo label are dropped from
//!   `S(i)` (the partner always stays);
//! - attraction: `S(i)` is every other view, and same-label views join the
//!   positive set `P(i)` alongside the partner.
//!
//! Each per-anchor term is `mean over p in P(i) of -log(sim(z_i,z_p) / sum
//! over s in S(i) of sim(z_i,z_s))`. Writing `r_s` for the softmax ratio
//! `sim(z_i,z_s) / sum`, the gradient of the term with respect to any view
//! factors through the coefficient `c_{i,s} = r_s - 1/|P(i)|·[s in P(i)]`,
//! which also yields the mining weights `sigma^- = r_n` (negatives) and
//! `sigma^+ = 1/|P(i)| - r_p` (positives): more similar negatives and less
//! similar positives get larger weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingMatrix, Temperature};
use crate::exec;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch embeddings must be row-normalized")]
    UnnormalizedInput,
    #[error("labels cover {got} views, batch has {expected}")]
    LabelCardinalityMismatch { expected: usize, got: usize },
    #[error("views {0} and {1} come from one source but carry different labels")]
    PairInconsistent(usize, usize),
    #[error("view batch needs an even, positive row count, got {rows}")]
    OddViewCount { rows: usize },
    #[error("hierarchical loss needs at least one label level")]
    EmptyLevels,
    #[error("mining coefficients are not defined for a multi-level averaged report")]
    NotApplicable,
}

/// A pseudo label for one sample: a cluster index, or the singleton sentinel
/// meaning "treat this sample as its own instance".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoLabel {
    Assigned(usize),
    Singleton,
}

impl PseudoLabel {
    /// Label-matching semantics: singletons match nothing, including each
    /// other. Structural equality (`==`) is separate and intentional.
    pub fn same_group(self, other: PseudoLabel) -> bool {
        match (self, other) {
            (PseudoLabel::Assigned(a), PseudoLabel::Assigned(b)) => a == b,
            _ => false,
        }
    }

    pub fn is_singleton(self) -> bool {
        matches!(self, PseudoLabel::Singleton)
    }
}

/// A mini-batch of `2M` views: the two augmented views of source `j` sit at
/// rows `2j` and `2j+1` and are each other's positives.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    m_source: usize,
    embeddings: EmbeddingMatrix,
}

impl ViewBatch {
    pub fn new(embeddings: EmbeddingMatrix) -> Result<Self, LossError> {
        let rows = embeddings.rows();
        if rows == 0 || !rows.is_multiple_of(2) {
            return Err(LossError::OddViewCount { rows });
        }
        Ok(ViewBatch {
            m_source: rows / 2,
            embeddings,
        })
    }

    pub fn m_source(&self) -> usize {
        self.m_source
    }

    pub fn views(&self) -> usize {
        2 * self.m_source
    }

    /// The paired view of `i`; an involution with `pair_of(2j) = 2j+1`.
    pub fn pair_of(&self, i: usize) -> usize {
        i ^ 1
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }
}

/// Per-view pseudo labels for one batch; both views of a source image always
/// carry the same label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLabels {
    labels: Vec<PseudoLabel>,
}

impl BatchLabels {
    /// Expands one label per source image into the per-view layout.
    pub fn from_sources(source_labels: &[PseudoLabel]) -> Self {
        let mut labels = Vec::with_capacity(source_labels.len() * 2);
        for &l in source_labels {
            labels.push(l);
            labels.push(l);
        }
        BatchLabels { labels }
    }

    /// Expands one class id per source image.
    pub fn from_source_classes(classes: &[usize]) -> Self {
        let as_labels: Vec<PseudoLabel> =
            classes.iter().map(|&c| PseudoLabel::Assigned(c)).collect();
        Self::from_sources(&as_labels)
    }

    pub fn all_singleton(views: usize) -> Self {
        BatchLabels {
            labels: vec![PseudoLabel::Singleton; views],
        }
    }

    /// Builds from per-view labels, rejecting pairs whose two views disagree.
    pub fn from_views(labels: Vec<PseudoLabel>) -> Result<Self, LossError> {
        if !labels.len().is_multiple_of(2) {
            return Err(LossError::OddViewCount { rows: labels.len() });
        }
        for j in 0..labels.len() / 2 {
            if labels[2 * j] != labels[2 * j + 1] {
                return Err(LossError::PairInconsistent(2 * j, 2 * j + 1));
            }
        }
        Ok(BatchLabels { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, view: usize) -> PseudoLabel {
        self.labels[view]
    }

    pub fn labels(&self) -> &[PseudoLabel] {
        &self.labels
    }
}

/// Which contrastive objective produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Inst,
    Elim,
    Attr,
}

/// Mining coefficients for one anchor: `(view index, sigma)` pairs.
///
/// `sigma^-` is the softmax ratio of the negative; `sigma^+` is
/// `1/|P| - ratio` for a positive (so `1 - ratio` for the single-positive
/// losses). The ratios over `S(i)` sum to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorCoefficients {
    pub anchor: usize,
    pub positives: Vec<(usize, f64)>,
    pub negatives: Vec<(usize, f64)>,
}

/// Loss value, per-anchor terms, and gradients for one batch.
///
/// `value` is the mean of `per_anchor`; per-batch-size comparability is why
/// the mean convention is used rather than the sum, and `per_anchor` keeps
/// the raw terms. `grad` is the total gradient of `value` with respect to
/// every view (anchor, positive, and negative roles all accumulated), while
/// `anchor_grad` row `i` is the unreduced anchor-role gradient of the single
/// term `per_anchor[i]` with respect to `z_i`.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub objective: Objective,
    pub value: f64,
    pub per_anchor: Vec<f64>,
    pub grad: EmbeddingMatrix,
    pub anchor_grad: EmbeddingMatrix,
    coefficients: Option<Vec<AnchorCoefficients>>,
}

impl LossReport {
    /// Structured record for harness logs.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "objective": self.objective,
            "value": self.value,
            "per_anchor": self.per_anchor,
        })
    }
}

/// Instance-level contrastive loss: every non-partner view is a negative.
pub fn loss_inst(batch: &ViewBatch, tau: Temperature) -> Result<LossReport, LossError> {
    eval_single(batch, None, Objective::Inst, tau)
}

/// Elimination loss: detected false negatives leave the denominator set.
pub fn loss_elim(
    batch: &ViewBatch,
    labels: &BatchLabels,
    tau: Temperature,
) -> Result<LossReport, LossError> {
    eval_single(batch, Some(labels), Objective::Elim, tau)
}

/// Attraction loss: detected false negatives become additional positives.
pub fn loss_attr(
    batch: &ViewBatch,
    labels: &BatchLabels,
    tau: Temperature,
) -> Result<LossReport, LossError> {
    eval_single(batch, Some(labels), Objective::Attr, tau)
}

/// Per-anchor mining coefficients of a single-level report.
///
/// Fails with [`LossError::NotApplicable`] for reports produced by averaging
/// several label levels, where no single softmax family exists.
pub fn hard_mining_coefficients(report: &LossReport) -> Result<&[AnchorCoefficients], LossError> {
    report
        .coefficients
        .as_deref()
        .ok_or(LossError::NotApplicable)
}

/// Averages the label-aware loss across granularity levels: value, per-anchor
/// terms, and gradients are the arithmetic mean of the per-level reports.
pub fn hierarchical_loss(
    batch: &ViewBatch,
    labels_per_level: &[BatchLabels],
    objective: Objective,
    tau: Temperature,
) -> Result<LossReport, LossError> {
    if labels_per_level.is_empty() {
        return Err(LossError::EmptyLevels);
    }
    let mut reports = Vec::with_capacity(labels_per_level.len());
    for labels in labels_per_level {
        reports.push(eval_single(batch, Some(labels), objective, tau)?);
    }
    if reports.len() == 1 {
        return Ok(reports.pop().unwrap());
    }
    let levels = reports.len() as f64;
    let n = batch.views();
    let dim = batch.embeddings().dim();
    let mut value = 0.0;
    let mut per_anchor = vec![0.0; n];
    let mut grad = vec![0.0; n * dim];
    let mut anchor_grad = vec![0.0; n * dim];
    for rep in &reports {
        value += rep.value;
        for (acc, v) in per_anchor.iter_mut().zip(&rep.per_anchor) {
            *acc += v;
        }
        for (acc, v) in grad.iter_mut().zip(rep.grad.values()) {
            *acc += v;
        }
        for (acc, v) in anchor_grad.iter_mut().zip(rep.anchor_grad.values()) {
            *acc += v;
        }
    }
    value /= levels;
    per_anchor.iter_mut().for_each(|v| *v /= levels);
    grad.iter_mut().for_each(|v| *v /= levels);
    anchor_grad.iter_mut().for_each(|v| *v /= levels);
    Ok(LossReport {
        objective,
        value,
        per_anchor,
        grad: EmbeddingMatrix::new(n, dim, grad).expect("finite gradient"),
        anchor_grad: EmbeddingMatrix::new(n, dim, anchor_grad).expect("finite gradient"),
        coefficients: None,
    })
}

struct AnchorEval {
    term: f64,
    c_row: Vec<f64>,
    coeff: AnchorCoefficients,
}

fn eval_single(
    batch: &ViewBatch,
    labels: Option<&BatchLabels>,
    objective: Objective,
    tau: Temperature,
) -> Result<LossReport, LossError> {
    let z = batch.embeddings();
    if !z.is_normalized() {
        return Err(LossError::UnnormalizedInput);
    }
    if let Some(l) = labels {
        if l.len() != z.rows() {
            return Err(LossError::LabelCardinalityMismatch {
                expected: z.rows(),
                got: l.len(),
            });
        }
    }
    let n = z.rows();
    let dim = z.dim();
    let tau_v = tau.value();

    let evals: Vec<AnchorEval> = exec::map_indexed(n, |i| {
        let zi = z.row(i);
        let partner = i ^ 1;
        let sims: Vec<f64> = (0..n).map(|s| (dot(zi, z.row(s)) / tau_v).exp()).collect();

        // Denominator set S(i) and positive set P(i); the partner is always
        // in both regardless of labels.
        let mut in_s = vec![false; n];
        let mut in_p = vec![false; n];
        in_s[partner] = true;
        in_p[partner] = true;
        let mut p_count = 1usize;
        for s in 0..n {
            if s == i || s == partner {
                continue;
            }
            let same = labels
                .map(|l| l.get(s).same_group(l.get(i)))
                .unwrap_or(false);
            match objective {
                Objective::Inst => in_s[s] = true,
                Objective::Elim => in_s[s] = !same,
                Objective::Attr => {
                    in_s[s] = true;
                    if same {
                        in_p[s] = true;
                        p_count += 1;
                    }
                }
            }
        }

        let denom: f64 = (0..n).filter(|&s| in_s[s]).map(|s| sims[s]).sum();
        let inv_p = 1.0 / p_count as f64;

        let mut c_row = vec![0.0; n];
        let mut positives = Vec::with_capacity(p_count);
        let mut negatives = Vec::new();
        let mut term = 0.0;
        for s in 0..n {
            if !in_s[s] {
                continue;
            }
            let ratio = sims[s] / denom;
            if in_p[s] {
                term -= ratio.ln();
                positives.push((s, inv_p - ratio));
                c_row[s] = ratio - inv_p;
            } else {
                negatives.push((s, ratio));
                c_row[s] = ratio;
            }
        }
        term *= inv_p;

        AnchorEval {
            term,
            c_row,
            coeff: AnchorCoefficients {
                anchor: i,
                positives,
                negatives,
            },
        }
    });

    let per_anchor: Vec<f64> = evals.iter().map(|e| e.term).collect();
    let value = per_anchor.iter().sum::<f64>() / n as f64;

    // Flattened coefficient matrix: c[i*n + s] scales z_s inside the gradient
    // of anchor i's term; the total gradient for view v collects its anchor
    // row plus the column of contributions from every other anchor.
    let mut c = vec![0.0; n * n];
    let mut coefficients = Vec::with_capacity(n);
    for (i, e) in evals.into_iter().enumerate() {
        c[i * n..(i + 1) * n].copy_from_slice(&e.c_row);
        coefficients.push(e.coeff);
    }

    let mut anchor_values = vec![0.0; n * dim];
    exec::fill_rows(&mut anchor_values, dim, |i, out| {
        for u in 0..n {
            let w = c[i * n + u];
            if w != 0.0 {
                for (o, zv) in out.iter_mut().zip(z.row(u)) {
                    *o += w * zv;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= tau_v;
        }
    });

    let scale = tau_v * n as f64;
    let mut grad_values = vec![0.0; n * dim];
    exec::fill_rows(&mut grad_values, dim, |v, out| {
        for u in 0..n {
            let w = c[v * n + u] + c[u * n + v];
            if w != 0.0 {
                for (o, zv) in out.iter_mut().zip(z.row(u)) {
                    *o += w * zv;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= scale;
        }
    });

    Ok(LossReport {
        objective,
        value,
        per_anchor,
        grad: EmbeddingMatrix::new(n, dim, grad_values).expect("finite gradient"),
        anchor_grad: EmbeddingMatrix::new(n, dim, anchor_values).expect("finite gradient"),
        coefficients: Some(coefficients),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    fn seeded_batch(m: usize, dim: usize, seed: u64) -> ViewBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..2 * m)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(&rows)
            .unwrap()
            .normalize_rows()
            .unwrap();
        ViewBatch::new(m).unwrap()
    }

    fn orthonormal_batch(rows: usize) -> ViewBatch {
        let mut vals = Vec::new();
        for i in 0..rows {
            let mut row = vec![0.0; rows];
            row[i] = 1.0;
            vals.push(row);
        }
        let m = EmbeddingMatrix::from_rows(&vals)
            .unwrap()
            .normalize_rows()
            .unwrap();
        ViewBatch::new(m).unwrap()
    }

    #[test]
    fn same_group_semantics() {
        use PseudoLabel::*;
        assert!(Assigned(3).same_group(Assigned(3)));
        assert!(!Assigned(3).same_group(Assigned(4)));
        assert!(!Singleton.same_group(Singleton));
        assert!(!Singleton.same_group(Assigned(3)));
        // structural equality is a different relation
        assert_eq!(Singleton, Singleton);
    }

    #[test]
    fn batch_labels_reject_mismatched_pair() {
        use PseudoLabel::*;
        let err = BatchLabels::from_views(vec![Assigned(1), Assigned(2)]);
        assert!(matches!(err, Err(LossError::PairInconsistent(0, 1))));
        assert!(BatchLabels::from_views(vec![Singleton, Singleton]).is_ok());
    }

    #[test]
    fn inst_single_image_is_zero() {
        let batch = seeded_batch(1, 4, 5);
        let rep = loss_inst(&batch, tau(0.5)).unwrap();
        assert_eq!(rep.value, 0.0);
        assert_eq!(rep.per_anchor, vec![0.0, 0.0]);
        assert!(rep.grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn elim_all_shared_label_is_zero() {
        let batch = seeded_batch(3, 6, 9);
        let labels = BatchLabels::from_sources(&[PseudoLabel::Assigned(7); 3]);
        let rep = loss_elim(&batch, &labels, tau(0.2)).unwrap();
        assert_eq!(rep.value, 0.0);
        assert!(rep.per_anchor.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn elim_reduces_to_inst_under_all_singleton() {
        let batch = seeded_batch(4, 8, 17);
        let labels = BatchLabels::all_singleton(8);
        let a = loss_inst(&batch, tau(0.5)).unwrap();
        let b = loss_elim(&batch, &labels, tau(0.5)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (x, y) in a.grad.values().iter().zip(b.grad.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attr_reduces_to_inst_under_all_singleton() {
        let batch = seeded_batch(4, 8, 23);
        let labels = BatchLabels::all_singleton(8);
        let a = loss_inst(&batch, tau(0.3)).unwrap();
        let b = loss_attr(&batch, &labels, tau(0.3)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (x, y) in a.grad.values().iter().zip(b.grad.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.anchor_grad.values().iter().zip(b.anchor_grad.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_equidistant_sigmas() {
        // Four mutually orthogonal views, all-singleton labels, tau = 1:
        // every similarity from anchor 0 is exp(0) = 1, so the denominator is
        // 3 and each ratio 1/3. sigma+ = 2/3, both sigma- = 1/3, and the
        // anchor term is ln 3.
        let batch = orthonormal_batch(4);
        let labels = BatchLabels::all_singleton(4);
        let rep = loss_elim(&batch, &labels, tau(1.0)).unwrap();
        let coeffs = hard_mining_coefficients(&rep).unwrap();
        let a0 = &coeffs[0];
        assert_eq!(a0.positives.len(), 1);
        assert_eq!(a0.positives[0].0, 1);
        assert!((a0.positives[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(a0.negatives.len(), 2);
        for &(_, s) in &a0.negatives {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((rep.per_anchor[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigma_ratios_sum_to_one_per_anchor() {
        let batch = seeded_batch(6, 8, 31);
        let labels = BatchLabels::from_sources(&[
            PseudoLabel::Assigned(0),
            PseudoLabel::Assigned(0),
            PseudoLabel::Assigned(1),
            PseudoLabel::Singleton,
            PseudoLabel::Assigned(1),
            PseudoLabel::Singleton,
        ]);
        for rep in [
            loss_elim(&batch, &labels, tau(0.4)).unwrap(),
            loss_attr(&batch, &labels, tau(0.4)).unwrap(),
        ] {
            let inv_p: Vec<f64> = hard_mining_coefficients(&rep)
                .unwrap()
                .iter()
                .map(|c| 1.0 / c.positives.len() as f64)
                .collect();
            for (c, inv_p) in hard_mining_coefficients(&rep).unwrap().iter().zip(inv_p) {
                // each positive ratio is inv_p - sigma+, each negative ratio is sigma-
                let total: f64 = c.positives.iter().map(|&(_, s)| inv_p - s).sum::<f64>()
                    + c.negatives.iter().map(|&(_, s)| s).sum::<f64>();
                assert!((total - 1.0).abs() < 1e-10, "anchor {}: {total}", c.anchor);
            }
        }
    }

    #[test]
    fn sigma_negative_monotone_in_similarity() {
        let batch = seeded_batch(6, 8, 37);
        let labels = BatchLabels::all_singleton(12);
        let rep = loss_elim(&batch, &labels, tau(0.5)).unwrap();
        let z = batch.embeddings();
        for c in hard_mining_coefficients(&rep).unwrap() {
            let zi = z.row(c.anchor);
            for &(n1, s1) in &c.negatives {
                for &(n2, s2) in &c.negatives {
                    let sim1 = dot(zi, z.row(n1));
                    let sim2 = dot(zi, z.row(n2));
                    if sim1 > sim2 {
                        assert!(s1 > s2, "anchor {}: sims {sim1} vs {sim2}", c.anchor);
                    }
                }
            }
        }
    }

    #[test]
    fn triplet_direction_structure() {
        // Anchor e1, positive e2, and a doubled negative at e3: the anchor
        // gradient must point toward the negative and away from the positive.
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ];
        let m = EmbeddingMatrix::from_rows(&rows)
            .unwrap()
            .normalize_rows()
            .unwrap();
        let batch = ViewBatch::new(m).unwrap();
        let labels = BatchLabels::all_singleton(4);
        let rep = loss_elim(&batch, &labels, tau(0.5)).unwrap();
        let g0 = rep.anchor_grad.row(0);
        assert_eq!(g0[0], 0.0);
        assert!(g0[1] < 0.0, "positive direction must be attractive: {g0:?}");
        assert!(g0[2] > 0.0, "negative direction must be repulsive: {g0:?}");
    }

    #[test]
    fn hierarchical_identical_levels_match_single() {
        let batch = seeded_batch(4, 6, 41);
        let labels = BatchLabels::from_sources(&[
            PseudoLabel::Assigned(0),
            PseudoLabel::Assigned(1),
            PseudoLabel::Assigned(0),
            PseudoLabel::Singleton,
        ]);
        let single = loss_elim(&batch, &labels, tau(0.2)).unwrap();
        let tripled = hierarchical_loss(
            &batch,
            &[labels.clone(), labels.clone(), labels.clone()],
            Objective::Elim,
            tau(0.2),
        )
        .unwrap();
        assert!((single.value - tripled.value).abs() < 1e-12);
        for (a, b) in single.grad.values().iter().zip(tripled.grad.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchical_all_singleton_levels_equal_inst() {
        let batch = seeded_batch(3, 5, 43);
        let levels = vec![BatchLabels::all_singleton(6), BatchLabels::all_singleton(6)];
        let h = hierarchical_loss(&batch, &levels, Objective::Elim, tau(0.7)).unwrap();
        let inst = loss_inst(&batch, tau(0.7)).unwrap();
        assert!((h.value - inst.value).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_empty_levels_error() {
        let batch = seeded_batch(2, 4, 47);
        assert!(matches!(
            hierarchical_loss(&batch, &[], Objective::Elim, tau(0.5)),
            Err(LossError::EmptyLevels)
        ));
    }

    #[test]
    fn hierarchical_multi_level_has_no_coefficients() {
        let batch = seeded_batch(2, 4, 53);
        let levels = vec![BatchLabels::all_singleton(4), BatchLabels::all_singleton(4)];
        let rep = hierarchical_loss(&batch, &levels, Objective::Attr, tau(0.5)).unwrap();
        assert!(matches!(
            hard_mining_coefficients(&rep),
            Err(LossError::NotApplicable)
        ));
    }

    #[test]
    fn unnormalized_input_rejected() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let batch = ViewBatch::new(m).unwrap();
        assert!(matches!(
            loss_inst(&batch, tau(0.5)),
            Err(LossError::UnnormalizedInput)
        ));
    }

    #[test]
    fn label_cardinality_checked() {
        let batch = seeded_batch(2, 4, 59);
        let labels = BatchLabels::all_singleton(6);
        assert!(matches!(
            loss_elim(&batch, &labels, tau(0.5)),
            Err(LossError::LabelCardinalityMismatch { expected: 4, got: 6 })
        ));
    }

    #[test]
    fn odd_view_count_rejected() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]])
            .unwrap()
            .normalize_rows()
            .unwrap();
        assert!(matches!(
            ViewBatch::new(m),
            Err(LossError::OddViewCount { rows: 1 })
        ));
    }

    #[test]
    fn values_finite_and_nonnegative() {
        for seed in 0..20u64 {
            let batch = seeded_batch(4, 6, 100 + seed);
            let labels = BatchLabels::from_sources(&[
                PseudoLabel::Assigned(0),
                PseudoLabel::Assigned(0),
                PseudoLabel::Singleton,
                PseudoLabel::Assigned(1),
            ]);
            for rep in [
                loss_inst(&batch, tau(0.2)).unwrap(),
                loss_elim(&batch, &labels, tau(0.2)).unwrap(),
                loss_attr(&batch, &labels, tau(0.2)).unwrap(),
            ] {
                assert!(rep.value.is_finite());
                assert!(rep.value >= 0.0);
                assert!(rep.per_anchor.iter().all(|t| t.is_finite() && *t >= 0.0));
                assert!(rep.grad.values().iter().all(|g| g.is_finite()));
                let mean = rep.per_anchor.iter().sum::<f64>() / rep.per_anchor.len() as f64;
                assert!((rep.value - mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn report_serializes() {
        let batch = seeded_batch(2, 4, 61);
        let rep = loss_inst(&batch, tau(0.5)).unwrap();
        let js = rep.to_json();
        assert_eq!(js["objective"], "inst");
        assert!(serde_json::to_string(&rep).unwrap().contains("per_anchor"));
    }
}
