//! Two-component PCA by power iteration on the covariance matrix, for the
//! raw 2-D embedding dumps.

use ifnd_core::embedding::EmbeddingMatrix;

/// Projects every row onto the top two principal components of the column-
/// centered data. Deterministic: fixed initial vector, fixed iteration
/// budget, and a sign convention that makes each component's largest-
/// magnitude coordinate positive. A one-dimensional input gets a zero second
/// coordinate.
pub fn pca_2d(m: &EmbeddingMatrix) -> EmbeddingMatrix {
    let n = m.rows();
    let d = m.dim();
    assert!(n > 0, "cannot project an empty matrix");

    let mut means = vec![0.0; d];
    for i in 0..n {
        for (mu, v) in means.iter_mut().zip(m.row(i)) {
            *mu += v;
        }
    }
    means.iter_mut().for_each(|mu| *mu /= n as f64);

    // covariance, d x d
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = m.row(i);
        for a in 0..d {
            let xa = row[a] - means[a];
            for b in 0..d {
                cov[a * d + b] += xa * (row[b] - means[b]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);

    let first = power_iterate(&cov, d);
    let lambda = rayleigh(&cov, &first, d);
    // deflate and repeat for the second component
    let mut deflated = cov.clone();
    for a in 0..d {
        for b in 0..d {
            deflated[a * d + b] -= lambda * first[a] * first[b];
        }
    }
    let second = if d >= 2 {
        power_iterate(&deflated, d)
    } else {
        vec![0.0; d]
    };

    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        let row = m.row(i);
        let centered: Vec<f64> = row.iter().zip(&means).map(|(v, mu)| v - mu).collect();
        out.push(centered.iter().zip(&first).map(|(x, v)| x * v).sum());
        out.push(centered.iter().zip(&second).map(|(x, v)| x * v).sum());
    }
    EmbeddingMatrix::new(n, 2, out).expect("finite projection")
}

fn power_iterate(cov: &[f64], d: usize) -> Vec<f64> {
    // deterministic non-degenerate start
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * (i + 1) as f64).collect();
    normalize(&mut v);
    for _ in 0..500 {
        let mut next = vec![0.0; d];
        for a in 0..d {
            next[a] = cov[a * d..(a + 1) * d]
                .iter()
                .zip(&v)
                .map(|(c, x)| c * x)
                .sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-15 {
            // zero-variance direction; keep the current vector
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    // sign convention: largest-magnitude coordinate positive
    let mut lead = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[lead].abs() {
            lead = i;
        }
    }
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

fn rayleigh(cov: &[f64], v: &[f64], d: usize) -> f64 {
    let mut cv = vec![0.0; d];
    for a in 0..d {
        cv[a] = cov[a * d..(a + 1) * d]
            .iter()
            .zip(v)
            .map(|(c, x)| c * x)
            .sum();
    }
    cv.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}
