//! Detection and representation quality metrics.
//!
//! The detection rates are pair-based: over all unordered pairs of distinct
//! samples, MTPR is the fraction of same-class pairs that share a
//! non-singleton detected label, and MTNR is the fraction of different-class
//! pairs that do not. Instance-level learning (everything singleton) thus
//! scores MTPR 0 and MTNR 1. Both are computed from integer contingency
//! counts, so they equal a brute-force pair enumeration exactly.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;
use crate::exec;
use crate::loss::PseudoLabel;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label arrays differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0} split needs at least two distinct classes")]
    DegenerateLabels(&'static str),
    #[error("embedding rows {rows} do not match {labels} labels")]
    ShapeMismatch { rows: usize, labels: usize },
    #[error("metrics csv parse error on line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground-truth classes alongside detected pseudo labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    true_label: Vec<usize>,
    detected: Vec<PseudoLabel>,
}

impl LabeledSet {
    pub fn new(true_label: Vec<usize>, detected: Vec<PseudoLabel>) -> Result<Self, MetricsError> {
        if true_label.len() != detected.len() {
            return Err(MetricsError::LengthMismatch(
                true_label.len(),
                detected.len(),
            ));
        }
        Ok(LabeledSet {
            true_label,
            detected,
        })
    }

    pub fn len(&self) -> usize {
        self.true_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_label.is_empty()
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_label
    }

    pub fn detected(&self) -> &[PseudoLabel] {
        &self.detected
    }
}

/// A pair-based rate plus the number of pairs it averaged over; zero pairs
/// means the value fell back to its vacuous default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRate {
    pub value: f64,
    pub pair_count: u64,
}

impl PairRate {
    pub fn is_vacuous(&self) -> bool {
        self.pair_count == 0
    }
}

fn choose2(n: u64) -> u64 {
    n * (n.saturating_sub(1)) / 2
}

struct PairCounts {
    positive_pairs: u64,
    detected_positive: u64,
    negative_pairs: u64,
    detected_cross: u64,
}

fn pair_counts(set: &LabeledSet) -> PairCounts {
    let n = set.len() as u64;
    let mut per_true: HashMap<usize, u64> = HashMap::new();
    let mut per_detected: HashMap<usize, u64> = HashMap::new();
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    for (t, d) in set.true_label.iter().zip(&set.detected) {
        *per_true.entry(*t).or_insert(0) += 1;
        if let PseudoLabel::Assigned(c) = d {
            *per_detected.entry(*c).or_insert(0) += 1;
            *joint.entry((*t, *c)).or_insert(0) += 1;
        }
    }
    let positive_pairs: u64 = per_true.values().map(|&c| choose2(c)).sum();
    let detected_positive: u64 = joint.values().map(|&c| choose2(c)).sum();
    let detected_same: u64 = per_detected.values().map(|&c| choose2(c)).sum();
    PairCounts {
        positive_pairs,
        detected_positive,
        negative_pairs: choose2(n) - positive_pairs,
        detected_cross: detected_same - detected_positive,
    }
}

/// Mean true positive rate: of the pairs that share a ground-truth class,
/// the fraction detected as false negatives of each other. Zero when no such
/// pair exists.
pub fn mtpr(set: &LabeledSet) -> PairRate {
    let c = pair_counts(set);
    if c.positive_pairs == 0 {
        return PairRate {
            value: 0.0,
            pair_count: 0,
        };
    }
    PairRate {
        value: c.detected_positive as f64 / c.positive_pairs as f64,
        pair_count: c.positive_pairs,
    }
}

/// Mean true negative rate: of the pairs from different ground-truth classes,
/// the fraction still treated as negatives (not sharing a non-singleton
/// detected label). One when no such pair exists.
pub fn mtnr(set: &LabeledSet) -> PairRate {
    let c = pair_counts(set);
    if c.negative_pairs == 0 {
        return PairRate {
            value: 1.0,
            pair_count: 0,
        };
    }
    let preserved = c.negative_pairs - c.detected_cross;
    PairRate {
        value: preserved as f64 / c.negative_pairs as f64,
        pair_count: c.negative_pairs,
    }
}

/// Turns detected labels into a plain clustering for NMI by giving every
/// singleton its own fresh cluster id.
pub fn detected_to_clusters(detected: &[PseudoLabel]) -> Vec<usize> {
    let max_assigned = detected
        .iter()
        .filter_map(|l| match l {
            PseudoLabel::Assigned(c) => Some(*c),
            PseudoLabel::Singleton => None,
        })
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let mut next = max_assigned;
    detected
        .iter()
        .map(|l| match l {
            PseudoLabel::Assigned(c) => *c,
            PseudoLabel::Singleton => {
                let id = next;
                next += 1;
                id
            }
        })
        .collect()
}

fn entropy_from_counts(counts: &BTreeMap<usize, u64>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with natural-log entropies and geometric
/// mean normalization. Two single-cluster partitions score 1; if exactly one
/// side has zero entropy the score is 0.
///
/// Accumulation iterates ordered maps so the result is reproducible
/// bit-for-bit across processes.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cb: BTreeMap<usize, u64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
        *joint.entry((x, y)).or_insert(0) += 1;
    }
    let ha = entropy_from_counts(&ca, n);
    let hb = entropy_from_counts(&cb, n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Multinomial logistic regression on frozen embeddings by full-batch
/// gradient descent; returns test accuracy. Ties in the argmax predict the
/// lowest class index.
pub fn linear_probe(
    train_emb: &EmbeddingMatrix,
    train_labels: &[usize],
    test_emb: &EmbeddingMatrix,
    test_labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<f64, MetricsError> {
    if train_emb.rows() != train_labels.len() {
        return Err(MetricsError::ShapeMismatch {
            rows: train_emb.rows(),
            labels: train_labels.len(),
        });
    }
    if test_emb.rows() != test_labels.len() {
        return Err(MetricsError::ShapeMismatch {
            rows: test_emb.rows(),
            labels: test_labels.len(),
        });
    }
    let mut classes: Vec<usize> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MetricsError::DegenerateLabels("train"));
    }
    {
        let mut t: Vec<usize> = test_labels.to_vec();
        t.sort_unstable();
        t.dedup();
        if t.len() < 2 {
            return Err(MetricsError::DegenerateLabels("test"));
        }
    }
    let class_index: HashMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n_classes = classes.len();
    let dim = train_emb.dim();
    let n = train_emb.rows();
    // weights are class-major rows of (dim weights + bias)
    let mut w = vec![0.0; n_classes * (dim + 1)];

    let logits_of = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..n_classes)
            .map(|c| {
                let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
                row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };

    for _ in 0..epochs {
        // per-sample probability residuals, then a sequential accumulation
        let residuals: Vec<Vec<f64>> = exec::map_indexed(n, |i| {
            let logits = logits_of(&w, train_emb.row(i));
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut p: Vec<f64> = exps.iter().map(|e| e / total).collect();
            p[class_index[&train_labels[i]]] -= 1.0;
            p
        });
        let mut grad = vec![0.0; n_classes * (dim + 1)];
        for (i, resid) in residuals.iter().enumerate() {
            let x = train_emb.row(i);
            for (c, &r) in resid.iter().enumerate() {
                let row = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
                for (g, v) in row[..dim].iter_mut().zip(x) {
                    *g += r * v;
                }
                row[dim] += r;
            }
        }
        let scale = lr / n as f64;
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= scale * g;
        }
    }

    let mut correct = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        let logits = logits_of(&w, test_emb.row(i));
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        if classes[best] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_emb.rows() as f64)
}

/// One row of the per-refresh metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub mtpr: f64,
    pub mtnr: f64,
    pub nmi: f64,
    pub loss: f64,
    pub probe_acc: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,mtpr,mtnr,nmi,loss,probe_acc";

impl MetricRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.mtpr, self.mtnr, self.nmi, self.loss, self.probe_acc
        )
    }
}

/// Writes the fixed-header CSV consumed by [`read_metrics_csv`].
pub fn write_metrics_csv<W: Write>(w: &mut W, records: &[MetricRecord]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_csv_row())?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<MetricRecord>, MetricsError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(MetricsError::Csv {
        line: 1,
        msg: "missing header".into(),
    })??;
    if header.trim() != METRICS_CSV_HEADER {
        return Err(MetricsError::Csv {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(MetricsError::Csv {
                line: i + 2,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let bad = |msg: String| MetricsError::Csv { line: i + 2, msg };
        out.push(MetricRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| bad(format!("bad epoch {:?}", fields[0])))?,
            mtpr: fields[1]
                .parse()
                .map_err(|_| bad(format!("bad mtpr {:?}", fields[1])))?,
            mtnr: fields[2]
                .parse()
                .map_err(|_| bad(format!("bad mtnr {:?}", fields[2])))?,
            nmi: fields[3]
                .parse()
                .map_err(|_| bad(format!("bad nmi {:?}", fields[3])))?,
            loss: fields[4]
                .parse()
                .map_err(|_| bad(format!("bad loss {:?}", fields[4])))?,
            probe_acc: fields[5]
                .parse()
                .map_err(|_| bad(format!("bad probe_acc {:?}", fields[5])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use PseudoLabel::{Assigned, Singleton};

    #[test]
    fn all_singleton_boundary() {
        let set = LabeledSet::new(vec![0, 0, 1, 1, 2], vec![Singleton; 5]).unwrap();
        assert_eq!(mtpr(&set).value, 0.0);
        assert_eq!(mtnr(&set).value, 1.0);
    }

    #[test]
    fn perfect_detection() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let detected: Vec<PseudoLabel> = truth.iter().map(|&t| Assigned(t)).collect();
        let set = LabeledSet::new(truth, detected).unwrap();
        assert_eq!(mtpr(&set).value, 1.0);
        assert_eq!(mtnr(&set).value, 1.0);
    }

    #[test]
    fn one_detected_cluster_two_classes() {
        let set = LabeledSet::new(vec![0, 0, 1, 1], vec![Assigned(9); 4]).unwrap();
        assert_eq!(mtpr(&set).value, 1.0);
        assert_eq!(mtnr(&set).value, 0.0);
    }

    #[test]
    fn six_sample_hand_case_matches_pair_loop() {
        let truth = vec![0, 0, 0, 1, 1, 2];
        let detected = vec![
            Assigned(5),
            Assigned(5),
            Singleton,
            Assigned(5),
            Assigned(7),
            Assigned(7),
        ];
        let set = LabeledSet::new(truth.clone(), detected.clone()).unwrap();

        // brute-force oracle over unordered pairs
        let mut pos = 0u64;
        let mut pos_hit = 0u64;
        let mut neg = 0u64;
        let mut neg_ok = 0u64;
        for a in 0..6 {
            for b in a + 1..6 {
                let same_det = detected[a].same_group(detected[b]);
                if truth[a] == truth[b] {
                    pos += 1;
                    if same_det {
                        pos_hit += 1;
                    }
                } else {
                    neg += 1;
                    if !same_det {
                        neg_ok += 1;
                    }
                }
            }
        }
        let tpr = mtpr(&set);
        let tnr = mtnr(&set);
        assert_eq!(tpr.value.to_bits(), (pos_hit as f64 / pos as f64).to_bits());
        assert_eq!(tnr.value.to_bits(), (neg_ok as f64 / neg as f64).to_bits());
        assert_eq!(tpr.pair_count, pos);
        assert_eq!(tnr.pair_count, neg);
    }

    #[test]
    fn vacuous_cases_flagged() {
        // all distinct classes: no positive pair
        let set = LabeledSet::new(vec![0, 1, 2], vec![Singleton; 3]).unwrap();
        let r = mtpr(&set);
        assert!(r.is_vacuous());
        assert_eq!(r.value, 0.0);
        // one class: no negative pair
        let set = LabeledSet::new(vec![4, 4], vec![Singleton; 2]).unwrap();
        let r = mtnr(&set);
        assert!(r.is_vacuous());
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn nmi_identical_partitions() {
        let a = vec![0, 0, 1, 1, 2, 2, 2];
        let v = nmi(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn nmi_permutation_invariant() {
        let a = vec![0, 0, 1, 1, 2, 2];
        let b = vec![7, 7, 3, 3, 1, 1];
        let v = nmi(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn nmi_single_cluster_conventions() {
        assert_eq!(nmi(&[1, 1, 1], &[2, 2, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 1, 2], &[5, 5, 5]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_symmetric_and_bounded() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..30 {
            let a: Vec<usize> = (0..50).map(|_| rng.random_range(0..5)).collect();
            let b: Vec<usize> = (0..50).map(|_| rng.random_range(0..7)).collect();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn nmi_matches_entropy_route_oracle() {
        // independent route: I = H(a) + H(b) - H(a,b)
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let a: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..50).map(|_| rng.random_range(0..6)).collect();
        let n = 50.0;
        let ent = |labels: &[usize]| {
            let mut m: HashMap<usize, u64> = HashMap::new();
            for &l in labels {
                *m.entry(l).or_insert(0) += 1;
            }
            m.values()
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum::<f64>()
        };
        let joint: Vec<usize> = a.iter().zip(&b).map(|(&x, &y)| x * 100 + y).collect();
        let ha = ent(&a);
        let hb = ent(&b);
        let hj = ent(&joint);
        let expect = (ha + hb - hj) / (ha * hb).sqrt();
        let got = nmi(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-10, "impl {got} vs oracle {expect}");
    }

    #[test]
    fn nmi_length_mismatch() {
        assert!(matches!(
            nmi(&[0, 1], &[0]),
            Err(MetricsError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn probe_separable_blobs() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let center = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![
                center + rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ]);
            labels.push(c);
        }
        let emb = EmbeddingMatrix::from_rows(&rows).unwrap();
        let acc = linear_probe(&emb, &labels, &emb, &labels, 200, 0.5).unwrap();
        assert!(acc >= 0.95, "separable blobs should probe >= 0.95, got {acc}");
    }

    #[test]
    fn probe_shuffled_labels_near_chance() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let emb = EmbeddingMatrix::from_rows(&rows).unwrap();
        let acc = linear_probe(&emb, &labels, &emb, &labels, 100, 0.5).unwrap();
        assert!(
            (acc - 0.5).abs() <= 0.1,
            "random labels should stay near chance, got {acc}"
        );
    }

    #[test]
    fn probe_single_point_per_class() {
        let emb = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let labels = vec![3, 8];
        let acc = linear_probe(&emb, &labels, &emb, &labels, 300, 0.5).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_degenerate_split_rejected() {
        let emb = EmbeddingMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            linear_probe(&emb, &[1, 1], &emb, &[1, 1], 10, 0.1),
            Err(MetricsError::DegenerateLabels("train"))
        ));
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let records = vec![
            MetricRecord {
                epoch: 0,
                mtpr: 0.0,
                mtnr: 1.0,
                nmi: 0.25,
                loss: 2.079441,
                probe_acc: 0.5,
            },
            MetricRecord {
                epoch: 5,
                mtpr: 0.4375,
                mtnr: 0.996,
                nmi: 0.83,
                loss: 1.25,
                probe_acc: 0.91,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,mtpr,mtnr,nmi,loss,probe_acc\n"));
        let back = read_metrics_csv(&buf[..]).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn detected_to_clusters_gives_singletons_unique_ids() {
        let det = vec![Assigned(0), Singleton, Assigned(0), Singleton];
        let clusters = detected_to_clusters(&det);
        assert_eq!(clusters[0], clusters[2]);
        assert_ne!(clusters[1], clusters[3]);
        assert_ne!(clusters[1], clusters[0]);
    }
}
