//! A small MLP encoder / projection-head pair with manual backpropagation.
//!
//! The encoder `f` maps raw inputs to features `v` (rectified at every
//! layer); the projector `g` maps features to the pre-normalization output
//! `u` (rectified hidden layers, linear final layer), and the embedding is
//! `z = u / |u|`. The backward pass chain-rules through the normalization and
//! both stacks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingMatrix, EmbeddingError};
use crate::exec;
use crate::seeding::{self, stream};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value; the rectifier
    /// subgradient at zero is taken as zero.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by its activation; weights are out x in,
/// row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        Layer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        }
    }

    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let pre = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *slot = self.activation.apply(pre);
        }
    }
}

/// Encoder and projector parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub encoder: Vec<Layer>,
    pub projector: Vec<Layer>,
}

impl EncoderParams {
    /// Uniform init scaled by `1/sqrt(fan_in)` per layer. `encoder_widths`
    /// lists the output width of every encoder layer (the last is the
    /// feature dimension); `projector_widths` likewise ends at the embedding
    /// dimension. Encoder layers are rectified; projector hidden layers are
    /// rectified with a linear final layer.
    pub fn init(
        input_dim: usize,
        encoder_widths: &[usize],
        projector_widths: &[usize],
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[stream::INIT]));
        let mut encoder = Vec::new();
        let mut prev = input_dim;
        for &w in encoder_widths {
            encoder.push(Layer::init(prev, w, Activation::Relu, &mut rng));
            prev = w;
        }
        let mut projector = Vec::new();
        for (i, &w) in projector_widths.iter().enumerate() {
            let act = if i + 1 == projector_widths.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            projector.push(Layer::init(prev, w, act, &mut rng));
            prev = w;
        }
        EncoderParams { encoder, projector }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder
            .first()
            .or(self.projector.first())
            .map(|l| l.in_dim)
            .unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder
            .last()
            .map(|l| l.out_dim)
            .unwrap_or_else(|| self.input_dim())
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector
            .last()
            .map(|l| l.out_dim)
            .unwrap_or_else(|| self.feature_dim())
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(self.projector.iter())
    }
}

/// Gradients for one layer, same shapes as the layer parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every parameter in the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamGrads {
    pub encoder: Vec<LayerGrads>,
    pub projector: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let zero = |ls: &[Layer]| {
            ls.iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect()
        };
        ParamGrads {
            encoder: zero(&params.encoder),
            projector: zero(&params.projector),
        }
    }
}

/// Forward-pass result with the activation cache needed by [`backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Encoder output `v` for every input row.
    pub features: EmbeddingMatrix,
    /// Unit-normalized projector output `z`.
    pub embeddings: EmbeddingMatrix,
    /// Activations per stage: input, then one entry per layer; the last is
    /// the pre-normalization output `u`.
    activations: Vec<EmbeddingMatrix>,
    u_norms: Vec<f64>,
}

/// Runs the full stack: `v = f(x)`, `z = normalize(g(v))`.
pub fn forward(params: &EncoderParams, inputs: &EmbeddingMatrix) -> Result<Forward, NnError> {
    if inputs.dim() != params.input_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "input dim {} vs first layer {}",
            inputs.dim(),
            params.input_dim()
        )));
    }
    let n = inputs.rows();
    let mut activations: Vec<EmbeddingMatrix> = vec![inputs.clone()];
    for layer in params.layers() {
        let prev = activations.last().unwrap();
        let mut vals = vec![0.0; n * layer.out_dim];
        exec::fill_rows(&mut vals, layer.out_dim, |row, out| {
            layer.forward_row(prev.row(row), out);
        });
        activations.push(EmbeddingMatrix::new(n, layer.out_dim, vals)?);
    }
    let u = activations.last().unwrap();
    let u_norms: Vec<f64> = (0..n)
        .map(|i| u.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let embeddings = u.normalize_rows()?;
    let features = activations[params.encoder.len()].clone();
    Ok(Forward {
        features,
        embeddings,
        activations,
        u_norms,
    })
}

/// Backpropagates `dL/dz` through the normalization and both stacks,
/// returning gradients for every weight and bias.
pub fn backward(
    params: &EncoderParams,
    fwd: &Forward,
    dloss_dz: &EmbeddingMatrix,
) -> Result<ParamGrads, NnError> {
    let z = &fwd.embeddings;
    if dloss_dz.rows() != z.rows() || dloss_dz.dim() != z.dim() {
        return Err(NnError::ShapeMismatch(format!(
            "gradient {}x{} vs embeddings {}x{}",
            dloss_dz.rows(),
            dloss_dz.dim(),
            z.rows(),
            z.dim()
        )));
    }
    let n = z.rows();
    let all_layers: Vec<&Layer> = params.layers().collect();
    let mut grads = ParamGrads::zeros_like(params);

    for row in 0..n {
        // through z = u / |u|:  du = (dz - (dz . z) z) / |u|
        let dz = dloss_dz.row(row);
        let zr = z.row(row);
        let norm = fwd.u_norms[row];
        let dzdotz: f64 = dz.iter().zip(zr).map(|(a, b)| a * b).sum();
        let mut delta: Vec<f64> = dz
            .iter()
            .zip(zr)
            .map(|(d, zv)| (d - dzdotz * zv) / norm)
            .collect();

        for (idx, layer) in all_layers.iter().enumerate().rev() {
            let out_act = fwd.activations[idx + 1].row(row);
            let in_act = fwd.activations[idx].row(row);
            // delta currently holds dL/d(out); convert to dL/d(pre)
            for (d, &o) in delta.iter_mut().zip(out_act) {
                *d *= layer.activation.derivative_from_output(o);
            }
            let lg = if idx < params.encoder.len() {
                &mut grads.encoder[idx]
            } else {
                &mut grads.projector[idx - params.encoder.len()]
            };
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let wrow = &mut lg.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, &x) in wrow.iter_mut().zip(in_act) {
                        *g += d * x;
                    }
                }
                lg.bias[o] += d;
            }
            if idx > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, &w) in prev.iter_mut().zip(wrow) {
                            *p += d * w;
                        }
                    }
                }
                delta = prev;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(dim: usize) -> Layer {
        let mut l = Layer::new(dim, dim, Activation::Identity);
        for i in 0..dim {
            l.weights[i * dim + i] = 1.0;
        }
        l
    }

    #[test]
    fn identity_network_normalizes_input() {
        let params = EncoderParams {
            encoder: vec![identity_layer(3)],
            projector: vec![identity_layer(3)],
        };
        let x = EmbeddingMatrix::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let fwd = forward(&params, &x).unwrap();
        assert_eq!(fwd.embeddings.row(0), &[0.6, 0.8, 0.0]);
        assert_eq!(fwd.features.row(0), &[0.6, 0.8, 0.0]);
    }

    #[test]
    fn zero_parameters_yield_zero_row_error() {
        let params = EncoderParams {
            encoder: vec![Layer::new(2, 4, Activation::Relu)],
            projector: vec![Layer::new(4, 3, Activation::Identity)],
        };
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        match forward(&params, &x) {
            Err(NnError::Embedding(EmbeddingError::ZeroRow { row: 0 })) => {}
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn input_shape_checked() {
        let params = EncoderParams::init(4, &[8], &[3], 0);
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            forward(&params, &x),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_matches_layer_by_layer_recomputation() {
        let params = EncoderParams::init(3, &[5, 4], &[4, 2], 42);
        let x = EmbeddingMatrix::from_rows(&[vec![0.3, -0.7, 1.1], vec![-0.2, 0.5, 0.9]]).unwrap();
        let fwd = forward(&params, &x).unwrap();

        // independent re-evaluation, one layer at a time
        for row in 0..2 {
            let mut a: Vec<f64> = x.row(row).to_vec();
            for layer in params.encoder.iter().chain(&params.projector) {
                let mut next = vec![0.0; layer.out_dim];
                for (o, slot) in next.iter_mut().enumerate() {
                    let mut pre = layer.bias[o];
                    for (i, &v) in a.iter().enumerate() {
                        pre += layer.weights[o * layer.in_dim + i] * v;
                    }
                    *slot = match layer.activation {
                        Activation::Relu => pre.max(0.0),
                        Activation::Identity => pre,
                    };
                }
                a = next;
            }
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (k, &u) in a.iter().enumerate() {
                let expect = u / norm;
                assert!(
                    (fwd.embeddings.row(row)[k] - expect).abs() < 1e-12,
                    "row {row} coord {k}"
                );
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_gradients() {
        let params = EncoderParams::init(3, &[6], &[4], 7);
        let x = EmbeddingMatrix::from_rows(&[vec![0.4, 0.1, -0.9]]).unwrap();
        let fwd = forward(&params, &x).unwrap();
        let dz = EmbeddingMatrix::zeros(1, 4);
        let grads = backward(&params, &fwd, &dz).unwrap();
        for lg in grads.encoder.iter().chain(&grads.projector) {
            assert!(lg.weights.iter().all(|&g| g == 0.0));
            assert!(lg.bias.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_matches_outer_product_form() {
        // one linear layer and no projector: u = Wx + b, z = u/|u|,
        // so dW = du x^T and db = du with du = (dz - (dz.z)z)/|u|.
        let mut layer = Layer::new(2, 2, Activation::Identity);
        layer.weights = vec![1.5, -0.3, 0.2, 0.9];
        layer.bias = vec![0.1, -0.2];
        let params = EncoderParams {
            encoder: vec![layer],
            projector: vec![],
        };
        let x_row = [0.7, -1.3];
        let x = EmbeddingMatrix::from_rows(&[x_row.to_vec()]).unwrap();
        let fwd = forward(&params, &x).unwrap();
        let dz_row = [0.25, -0.75];
        let dz = EmbeddingMatrix::from_rows(&[dz_row.to_vec()]).unwrap();
        let grads = backward(&params, &fwd, &dz).unwrap();

        let z = fwd.embeddings.row(0);
        let u = [
            1.5 * x_row[0] + (-0.3) * x_row[1] + 0.1,
            0.2 * x_row[0] + 0.9 * x_row[1] - 0.2,
        ];
        let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
        let dzdotz = dz_row[0] * z[0] + dz_row[1] * z[1];
        let du = [
            (dz_row[0] - dzdotz * z[0]) / norm,
            (dz_row[1] - dzdotz * z[1]) / norm,
        ];
        #[allow(clippy::needless_range_loop)]
        for o in 0..2 {
            for i in 0..2 {
                let expect = du[o] * x_row[i];
                let got = grads.encoder[0].weights[o * 2 + i];
                assert!((got - expect).abs() < 1e-12, "w[{o}][{i}]: {got} vs {expect}");
            }
            assert!((grads.encoder[0].bias[o] - du[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_parameter_finite_differences_on_linear_functional() {
        // L = sum(C . z) is linear in z, so dL/dz = C and parameter-space
        // finite differences of L check the full chain rule.
        let params = EncoderParams::init(3, &[5], &[4], 11);
        let x = EmbeddingMatrix::from_rows(&[
            vec![0.9, -0.3, 0.5],
            vec![-0.6, 0.8, 0.1],
            vec![0.2, 0.4, -0.7],
        ])
        .unwrap();
        let c = EmbeddingMatrix::from_rows(&[
            vec![0.3, -0.2, 0.8, 0.5],
            vec![-0.7, 0.1, 0.2, -0.4],
            vec![0.6, 0.9, -0.5, 0.3],
        ])
        .unwrap();
        let loss = |p: &EncoderParams| -> f64 {
            let f = forward(p, &x).unwrap();
            f.embeddings
                .values()
                .iter()
                .zip(c.values())
                .map(|(z, cv)| z * cv)
                .sum()
        };
        let fwd = forward(&params, &x).unwrap();
        let grads = backward(&params, &fwd, &c).unwrap();

        let h = 1e-5;
        let mut p = params.clone();
        let check = |got: f64, expect: f64, what: &str| {
            let tol = 1e-6f64.max(1e-4 * expect.abs());
            assert!((got - expect).abs() < tol, "{what}: analytic {got} vs fd {expect}");
        };
        for li in 0..p.encoder.len() {
            for wi in 0..p.encoder[li].weights.len() {
                let orig = p.encoder[li].weights[wi];
                p.encoder[li].weights[wi] = orig + h;
                let plus = loss(&p);
                p.encoder[li].weights[wi] = orig - h;
                let minus = loss(&p);
                p.encoder[li].weights[wi] = orig;
                check(
                    grads.encoder[li].weights[wi],
                    (plus - minus) / (2.0 * h),
                    &format!("encoder layer {li} weight {wi}"),
                );
            }
        }
        for li in 0..p.projector.len() {
            for bi in 0..p.projector[li].bias.len() {
                let orig = p.projector[li].bias[bi];
                p.projector[li].bias[bi] = orig + h;
                let plus = loss(&p);
                p.projector[li].bias[bi] = orig - h;
                let minus = loss(&p);
                p.projector[li].bias[bi] = orig;
                check(
                    grads.projector[li].bias[bi],
                    (plus - minus) / (2.0 * h),
                    &format!("projector layer {li} bias {bi}"),
                );
            }
        }
    }
}
