//! A small feed-forward embedding network with exact manual gradients.
//!
//! Hidden layers use a leaky rectifier (slope 0.01); the final layer is
//! linear and its output is unit-normalized row-wise. Everything runs in
//! double precision so analytic gradients match central finite
//! differences tightly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Pre-normalization outputs with norm below this raise a degeneracy error.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// in_dim × out_dim.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

impl NetParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }
}

/// Everything forward saves so backward can be exact.
pub struct ForwardCache {
    pub input: Mat,
    /// Pre-activation z_l for every layer.
    pub pre_acts: Vec<Mat>,
    /// Post-activation a_l for hidden layers (last entry is the linear output).
    pub acts: Vec<Mat>,
    /// Row norms of the final linear output.
    pub norms: Vec<f64>,
    /// Unit-norm embeddings.
    pub embeddings: Mat,
}

/// Deterministic fan-in-scaled gaussian init with zero biases.
pub fn init_params(input_dim: usize, hidden_dims: &[usize], d: usize, seed: u64) -> NetParams {
    assert!(input_dim > 0 && d > 0, "dims must be positive");
    assert!(hidden_dims.iter().all(|&h| h > 0), "dims must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden_dims);
    dims.push(d);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let mut weight = Mat::zeros(fan_in, fan_out);
            for v in weight.data_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
            Layer {
                weight,
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    NetParams { layers }
}

fn leaky(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Embeds a batch; every output row is unit-norm.
pub fn forward(params: &NetParams, batch: &Mat) -> Result<(Mat, ForwardCache)> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Contract(format!(
            "forward: batch dim {} does not match net input dim {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    if !batch.is_finite() {
        return Err(Error::Contract("forward: batch contains non-finite values".into()));
    }
    let n_layers = params.layers.len();
    let mut pre_acts = Vec::with_capacity(n_layers);
    let mut acts = Vec::with_capacity(n_layers);
    let mut a = batch.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let mut z = a.matmul(&layer.weight);
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(layer.bias.iter()) {
                *v += b;
            }
        }
        pre_acts.push(z.clone());
        if li + 1 < n_layers {
            for v in z.data_mut() {
                *v = leaky(*v);
            }
        }
        acts.push(z.clone());
        a = z;
    }
    let linear_out = acts.last().unwrap().clone();
    let mut embeddings = linear_out.clone();
    let mut norms = Vec::with_capacity(embeddings.rows());
    for i in 0..embeddings.rows() {
        let row = embeddings.row_mut(i);
        let n = dot(row, row).sqrt();
        if n < DEGENERACY_THRESHOLD {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    let cache = ForwardCache {
        input: batch.clone(),
        pre_acts,
        acts,
        norms,
        embeddings: embeddings.clone(),
    };
    Ok((embeddings, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        NetGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// Gradient of the unit-normalization: (I - êêᵀ) g / ‖y‖, rowwise.
pub(crate) fn normalize_backward(embedding_row: &[f64], norm: f64, grad_row: &[f64]) -> Vec<f64> {
    let proj = dot(grad_row, embedding_row);
    embedding_row
        .iter()
        .zip(grad_row.iter())
        .map(|(&e, &g)| (g - proj * e) / norm)
        .collect()
}

/// Exact gradients for the composed network including the normalization
/// Jacobian. Returns parameter gradients and the gradient wrt the input batch.
pub fn backward(
    params: &NetParams,
    cache: &ForwardCache,
    grad_embeddings: &Mat,
) -> Result<(NetGrads, Mat)> {
    let b = cache.input.rows();
    if grad_embeddings.rows() != b || grad_embeddings.cols() != params.output_dim() {
        return Err(Error::Contract(format!(
            "backward: grad shape {}x{} does not match embeddings {}x{}",
            grad_embeddings.rows(),
            grad_embeddings.cols(),
            b,
            params.output_dim()
        )));
    }
    let n_layers = params.layers.len();

    // Through the normalization.
    let mut delta = Mat::zeros(b, params.output_dim());
    for i in 0..b {
        let row = normalize_backward(cache.embeddings.row(i), cache.norms[i], grad_embeddings.row(i));
        delta.row_mut(i).copy_from_slice(&row);
    }

    let mut grads = NetGrads::zeros_like(params);
    for li in (0..n_layers).rev() {
        let upstream_act = if li == 0 { &cache.input } else { &cache.acts[li - 1] };
        grads.layers[li].weight = upstream_act.matmul_at(&delta);
        let bias = &mut grads.layers[li].bias;
        for i in 0..b {
            for (g, &d) in bias.iter_mut().zip(delta.row(i).iter()) {
                *g += d;
            }
        }
        let mut next = delta.matmul_bt(&params.layers[li].weight);
        if li > 0 {
            let pre = &cache.pre_acts[li - 1];
            for (v, &z) in next.data_mut().iter_mut().zip(pre.data().iter()) {
                *v *= leaky_grad(z);
            }
        }
        delta = next;
    }
    Ok((grads, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::normalized;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn init_deterministic_and_zero_bias() {
        let a = init_params(64, &[64], 32, 5);
        let b = init_params(64, &[64], 32, 5);
        assert_eq!(a, b);
        for l in &a.layers {
            assert!(l.weight.data().iter().all(|v| v.is_finite()));
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_no_hidden_is_single_layer() {
        let p = init_params(16, &[], 8, 1);
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.input_dim(), 16);
        assert_eq!(p.output_dim(), 8);
    }

    #[test]
    fn identity_net_normalizes_input() {
        // single linear layer with identity weights: output = input / ‖input‖
        let d = 6;
        let mut weight = Mat::zeros(d, d);
        for i in 0..d {
            weight.set(i, i, 1.0);
        }
        let params = NetParams {
            layers: vec![Layer { weight, bias: vec![0.0; d] }],
        };
        let batch = random_batch(3, d, 2);
        let (emb, _) = forward(&params, &batch).unwrap();
        for i in 0..3 {
            let expect = normalized(batch.row(i));
            for (a, b) in emb.row(i).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_unit_norm() {
        let params = init_params(10, &[12, 7], 5, 3);
        let batch = random_batch(9, 10, 4);
        let (emb, _) = forward(&params, &batch).unwrap();
        for i in 0..emb.rows() {
            let n = dot(emb.row(i), emb.row(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_output_errors() {
        // zero weights collapse the pre-normalization output
        let params = NetParams {
            layers: vec![Layer {
                weight: Mat::zeros(4, 3),
                bias: vec![0.0; 3],
            }],
        };
        let batch = random_batch(2, 4, 8);
        match forward(&params, &batch) {
            Err(Error::DegenerateEmbedding { .. }) => {}
            Err(e) => panic!("expected degeneracy error, got {e}"),
            Ok(_) => panic!("expected degeneracy error, got Ok"),
        }
    }

    #[test]
    fn zero_grad_in_zero_grad_out() {
        let params = init_params(8, &[8], 4, 9);
        let batch = random_batch(5, 8, 10);
        let (_, cache) = forward(&params, &batch).unwrap();
        let g = Mat::zeros(5, 4);
        let (grads, gin) = backward(&params, &cache, &g).unwrap();
        for l in &grads.layers {
            assert!(l.weight.data().iter().all(|&v| v == 0.0));
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
        assert!(gin.data().iter().all(|&v| v == 0.0));
    }

    /// Scalar loss for gradient checking: fixed random projection of the embeddings.
    fn probe_loss(params: &NetParams, batch: &Mat, probe: &Mat) -> f64 {
        let (emb, _) = forward(params, batch).unwrap();
        emb.data().iter().zip(probe.data().iter()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn finite_difference_agreement_all_params() {
        let mut params = init_params(8, &[8], 4, 17);
        let batch = random_batch(6, 8, 18);
        let probe = random_batch(6, 4, 19);
        let (_, cache) = forward(&params, &batch).unwrap();
        let (grads, _) = backward(&params, &cache, &probe).unwrap();

        let eps = 1e-5;
        let mut checked = 0usize;
        for li in 0..params.layers.len() {
            let n_w = params.layers[li].weight.data().len();
            for idx in 0..n_w {
                let orig = params.layers[li].weight.data()[idx];
                params.layers[li].weight.data_mut()[idx] = orig + eps;
                let lp = probe_loss(&params, &batch, &probe);
                params.layers[li].weight.data_mut()[idx] = orig - eps;
                let lm = probe_loss(&params, &batch, &probe);
                params.layers[li].weight.data_mut()[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.layers[li].weight.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "layer {li} w[{idx}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
            for idx in 0..params.layers[li].bias.len() {
                let orig = params.layers[li].bias[idx];
                params.layers[li].bias[idx] = orig + eps;
                let lp = probe_loss(&params, &batch, &probe);
                params.layers[li].bias[idx] = orig - eps;
                let lm = probe_loss(&params, &batch, &probe);
                params.layers[li].bias[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.layers[li].bias[idx];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(((an - fd) / denom).abs() < 1e-4);
                checked += 1;
            }
        }
        assert_eq!(checked, params.n_params());
    }

    #[test]
    fn jacobian_vector_product_matches_directional_difference() {
        let params = init_params(8, &[10], 4, 23);
        let batch = random_batch(4, 8, 24);
        let probe = random_batch(4, 4, 25);
        let (_, cache) = forward(&params, &batch).unwrap();
        let (_, gin) = backward(&params, &cache, &probe).unwrap();
        // wᵀ J v via input grads against central difference of wᵀ f(x ± εv)
        let dir = random_batch(4, 8, 26);
        let eps = 1e-5;
        let mut plus = batch.clone();
        plus.axpy(eps, &dir);
        let mut minus = batch.clone();
        minus.axpy(-eps, &dir);
        let lp = probe_loss(&params, &plus, &probe);
        let lm = probe_loss(&params, &minus, &probe);
        let fd = (lp - lm) / (2.0 * eps);
        let an: f64 = gin.data().iter().zip(dir.data().iter()).map(|(a, b)| a * b).sum();
        assert!(
            ((an - fd) / an.abs().max(fd.abs()).max(1e-8)).abs() < 1e-4,
            "analytic {an} vs fd {fd}"
        );
    }

    #[test]
    fn normalization_grad_orthogonal_to_embedding() {
        let params = init_params(8, &[8], 4, 31);
        let batch = random_batch(5, 8, 32);
        let (emb, cache) = forward(&params, &batch).unwrap();
        let probe = random_batch(5, 4, 33);
        for i in 0..5 {
            let delta = normalize_backward(emb.row(i), cache.norms[i], probe.row(i));
            let inner = dot(&delta, emb.row(i));
            assert!(inner.abs() < 1e-10, "row {i}: inner product {inner}");
        }
    }

    #[test]
    fn forward_backward_bitwise_reproducible() {
        let params = init_params(12, &[9], 6, 40);
        let batch = random_batch(7, 12, 41);
        let probe = random_batch(7, 6, 42);
        let (e1, c1) = forward(&params, &batch).unwrap();
        let (e2, c2) = forward(&params, &batch).unwrap();
        assert_eq!(e1, e2);
        let (g1, i1) = backward(&params, &c1, &probe).unwrap();
        let (g2, i2) = backward(&params, &c2, &probe).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(i1, i2);
    }
}
