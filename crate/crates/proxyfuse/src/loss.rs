//! Classification heads with exact gradients: additive-angular-margin
//! softmax over class proxies, the dataset-aware mask that restricts each
//! sample's softmax to its own dataset, and the gradient-reversal domain
//! head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Cosines are clamped into [-1+COS_CLAMP, 1-COS_CLAMP] before arccos.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    /// Domain-adaptation loss weight.
    pub lambda_da: f64,
    /// Step at which the gradient reversal starts feeding the embedding;
    /// `None` keeps it off for the whole run (the head still trains).
    pub grl_active_after: Option<u64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.5,
            scale: 64.0,
            lambda_da: 0.1,
            grl_active_after: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            problems.push(format!("loss.margin must be in [0, pi/2), got {}", self.margin));
        }
        if self.scale <= 0.0 {
            problems.push(format!("loss.scale must be > 0, got {}", self.scale));
        }
        if self.lambda_da < 0.0 {
            problems.push(format!("loss.lambda_da must be >= 0, got {}", self.lambda_da));
        }
        problems
    }
}

/// The classification head: one unit-norm proxy vector per class, tagged
/// with its source dataset. Classes merged away stay in the matrix but
/// are marked inactive and excluded from every computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyMatrix {
    vecs: Mat,
    dataset_of: Vec<u32>,
    active: Vec<bool>,
}

impl ProxyMatrix {
    /// Random unit-norm proxies, one per class.
    pub fn init_random(dataset_of: Vec<u32>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vecs = Mat::zeros(dataset_of.len(), dim);
        for i in 0..dataset_of.len() {
            let row = vecs.row_mut(i);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = dot(row, row).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let n = dataset_of.len();
        ProxyMatrix {
            vecs,
            dataset_of,
            active: vec![true; n],
        }
    }

    pub fn from_parts(vecs: Mat, dataset_of: Vec<u32>, active: Vec<bool>) -> Self {
        assert_eq!(vecs.rows(), dataset_of.len());
        assert_eq!(vecs.rows(), active.len());
        ProxyMatrix { vecs, dataset_of, active }
    }

    pub fn n_classes(&self) -> usize {
        self.vecs.rows()
    }

    pub fn dim(&self) -> usize {
        self.vecs.cols()
    }

    pub fn vec(&self, class: usize) -> &[f64] {
        self.vecs.row(class)
    }

    pub fn vec_mut(&mut self, class: usize) -> &mut [f64] {
        self.vecs.row_mut(class)
    }

    pub fn vecs(&self) -> &Mat {
        &self.vecs
    }

    pub fn dataset_of(&self, class: usize) -> u32 {
        self.dataset_of[class]
    }

    pub fn dataset_of_all(&self) -> &[u32] {
        &self.dataset_of
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.active[class]
    }

    pub fn active_flags(&self) -> &[bool] {
        &self.active
    }

    pub fn deactivate(&mut self, class: usize) {
        self.active[class] = false;
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Global class ids of active proxies, ascending.
    pub fn active_ids(&self) -> Vec<u32> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i as u32))
            .collect()
    }

    /// Distinct dataset ids among active proxies.
    pub fn active_datasets(&self) -> Vec<u32> {
        let mut ds: Vec<u32> = self
            .active
            .iter()
            .zip(self.dataset_of.iter())
            .filter_map(|(&a, &d)| a.then_some(d))
            .collect();
        ds.sort_unstable();
        ds.dedup();
        ds
    }

    /// Re-normalizes every active proxy to unit norm (called after each
    /// optimizer update so cosines stay consistent).
    pub fn renormalize_active(&mut self) {
        for i in 0..self.n_classes() {
            if self.active[i] {
                let row = self.vecs.row_mut(i);
                let n = dot(row, row).sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
    }
}

/// Per-batch cache from [`angular_logits`], consumed by [`arcface_backward`].
pub struct AngleCache {
    /// Global class id of each compact logit column, ascending.
    pub active_cols: Vec<u32>,
    /// Compact column of each row's target class.
    pub target_col: Vec<usize>,
    /// Clamped target cosine per row.
    pub cos_target: Vec<f64>,
    /// d(target logit)/d(raw cosine) per row; 0 where the clamp binds.
    pub dtarget_dcos: Vec<f64>,
    /// Active proxies gathered into a compact A×d matrix.
    proxies_compact: Mat,
}

fn gather_active(proxies: &ProxyMatrix) -> (Vec<u32>, Mat) {
    let ids = proxies.active_ids();
    let mut compact = Mat::zeros(ids.len(), proxies.dim());
    for (row, &c) in ids.iter().enumerate() {
        compact.row_mut(row).copy_from_slice(proxies.vec(c as usize));
    }
    (ids, compact)
}

/// Scaled margin logits: s·cos(θ_j) everywhere except each row's target
/// column, which gets s·cos(θ+m) — falling back to s·(cosθ − m·sin m)
/// once θ exceeds π−m so the logit stays monotone in θ.
///
/// Columns cover only active classes; labels are global class ids.
pub fn angular_logits(
    embeddings: &Mat,
    proxies: &ProxyMatrix,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<(Mat, AngleCache)> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "angular_logits: {} embeddings vs {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if embeddings.cols() != proxies.dim() {
        return Err(Error::Contract(format!(
            "angular_logits: embedding dim {} vs proxy dim {}",
            embeddings.cols(),
            proxies.dim()
        )));
    }
    let (active_cols, proxies_compact) = gather_active(proxies);
    let mut col_of_class = vec![usize::MAX; proxies.n_classes()];
    for (col, &c) in active_cols.iter().enumerate() {
        col_of_class[c as usize] = col;
    }
    let mut target_col = Vec::with_capacity(labels.len());
    for &label in labels {
        if label as usize >= proxies.n_classes() || !proxies.is_active(label as usize) {
            return Err(Error::Contract(format!(
                "angular_logits: label {label} does not reference an active class"
            )));
        }
        target_col.push(col_of_class[label as usize]);
    }

    let mut logits = embeddings.matmul_bt(&proxies_compact);
    let (m, s) = (cfg.margin, cfg.scale);
    let (sin_m, cos_m) = m.sin_cos();
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let mut cos_target = Vec::with_capacity(labels.len());
    let mut dtarget_dcos = Vec::with_capacity(labels.len());
    for i in 0..logits.rows() {
        let t = target_col[i];
        let raw = logits.get(i, t);
        let clamped = raw.clamp(lo, hi);
        let clamp_bound = raw != clamped;
        // θ + m < π  ⟺  cosθ > cos(π − m) = −cos m
        let (logit_t, dfac) = if clamped > -cos_m {
            let sin_t = (1.0 - clamped * clamped).sqrt();
            let val = s * (clamped * cos_m - sin_t * sin_m);
            let d = s * (cos_m + sin_m * clamped / sin_t);
            (val, d)
        } else {
            (s * (clamped - m * sin_m), s)
        };
        logits.set(i, t, logit_t);
        cos_target.push(clamped);
        dtarget_dcos.push(if clamp_bound { 0.0 } else { dfac });
        // scale the non-target columns
        for (j, v) in logits.row_mut(i).iter_mut().enumerate() {
            if j != t {
                *v *= s;
            }
        }
    }
    Ok((
        logits,
        AngleCache {
            active_cols,
            target_col,
            cos_target,
            dtarget_dcos,
            proxies_compact,
        },
    ))
}

/// Row-major boolean mask over compact logit columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// The dataset indicator: mask[i][j] = 1 iff column j's class comes from
/// the same dataset as row i's label class. The target column is always 1.
pub fn dataset_mask(labels: &[u32], dataset_of: &[u32], active_cols: &[u32]) -> Mask {
    let rows = labels.len();
    let cols = active_cols.len();
    let mut data = vec![false; rows * cols];
    for (i, &label) in labels.iter().enumerate() {
        let own = dataset_of[label as usize];
        let row = &mut data[i * cols..(i + 1) * cols];
        for (j, &c) in active_cols.iter().enumerate() {
            row[j] = dataset_of[c as usize] == own;
        }
    }
    Mask { rows, cols, data }
}

/// Mean cross-entropy restricted per-row to masked columns, computed via
/// max-shifted log-sum-exp. `None` means all (active) columns count.
///
/// Returns the scalar loss and the gradient wrt logits; the gradient is
/// (softmax − onehot)/B on masked columns and exactly zero elsewhere. A
/// row whose only masked column is its target contributes exactly zero.
pub fn masked_cross_entropy(
    logits: &Mat,
    target_col: &[usize],
    mask: Option<&Mask>,
) -> Result<(f64, Mat)> {
    let b = logits.rows();
    let cols = logits.cols();
    if target_col.len() != b {
        return Err(Error::Contract("masked_cross_entropy: target/row count mismatch".into()));
    }
    if let Some(m) = mask {
        if m.rows != b || m.cols != cols {
            return Err(Error::Contract("masked_cross_entropy: mask shape mismatch".into()));
        }
    }
    let mut grad = Mat::zeros(b, cols);
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let t = target_col[i];
        if let Some(m) = mask {
            if !m.get(i, t) {
                return Err(Error::Contract(format!(
                    "masked_cross_entropy: row {i} target column is masked out"
                )));
            }
        }
        let included = |j: usize| mask.map_or(true, |m| m.get(i, j));
        let mut max = f64::NEG_INFINITY;
        for (j, &z) in row.iter().enumerate() {
            if included(j) && z > max {
                max = z;
            }
        }
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            if included(j) {
                sum += (z - max).exp();
            }
        }
        let lse = max + sum.ln();
        loss += lse - row[t];
        let grow = grad.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            if included(j) {
                grow[j] = (z - lse).exp();
            }
        }
        // a row whose only masked column is its target reduces to exactly
        // zero here: lse == z_t, exp(0) == 1, 1 - 1 == 0
        grow[t] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    loss *= scale;
    grad.scale(scale);
    Ok((loss, grad))
}

/// Gradients of the margin-logit layer: pushes `grad_logits` back onto the
/// embeddings and the active proxies.
pub fn arcface_backward(
    embeddings: &Mat,
    cache: &AngleCache,
    grad_logits: &Mat,
    cfg: &LossConfig,
) -> (Mat, Mat) {
    let mut grad_cos = grad_logits.clone();
    for i in 0..grad_cos.rows() {
        let t = cache.target_col[i];
        let row = grad_cos.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            if j == t {
                *v *= cache.dtarget_dcos[i];
            } else {
                *v *= cfg.scale;
            }
        }
    }
    let grad_emb = grad_cos.matmul(&cache.proxies_compact);
    let grad_proxies_compact = grad_cos.matmul_at(embeddings);
    (grad_emb, grad_proxies_compact)
}

/// Which softmax pool a sample sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftmaxMode {
    /// Eq-style dataset isolation: each sample only sees its own dataset's classes.
    DatasetAware,
    /// Post-fusion: every active class everywhere.
    Agnostic,
}

pub struct ClassificationOut {
    pub loss: f64,
    pub grad_embeddings: Mat,
    /// Global class ids of the rows of `grad_proxies_compact`.
    pub active_cols: Vec<u32>,
    pub grad_proxies_compact: Mat,
}

/// Margin softmax + (optionally dataset-masked) cross entropy + backward,
/// composed. Labels are global class ids of active classes.
pub fn classification_loss(
    embeddings: &Mat,
    proxies: &ProxyMatrix,
    labels: &[u32],
    mode: SoftmaxMode,
    cfg: &LossConfig,
) -> Result<ClassificationOut> {
    let (logits, cache) = angular_logits(embeddings, proxies, labels, cfg)?;
    let mask = match mode {
        SoftmaxMode::DatasetAware => Some(dataset_mask(
            labels,
            proxies.dataset_of_all(),
            &cache.active_cols,
        )),
        SoftmaxMode::Agnostic => None,
    };
    let (loss, grad_logits) = masked_cross_entropy(&logits, &cache.target_col, mask.as_ref())?;
    let (grad_embeddings, grad_proxies_compact) =
        arcface_backward(embeddings, &cache, &grad_logits, cfg);
    Ok(ClassificationOut {
        loss,
        grad_embeddings,
        active_cols: cache.active_cols,
        grad_proxies_compact,
    })
}

/// Linear dataset classifier probing the embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainHeadParams {
    /// n_datasets × d.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl DomainHeadParams {
    pub fn init(embed_dim: usize, n_datasets: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / embed_dim as f64).sqrt();
        let mut weight = Mat::zeros(n_datasets, embed_dim);
        for v in weight.data_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        DomainHeadParams {
            weight,
            bias: vec![0.0; n_datasets],
        }
    }

    pub fn n_datasets(&self) -> usize {
        self.weight.rows()
    }
}

pub struct DomainLossOut {
    /// Softmax cross-entropy of the dataset classifier (mean over batch).
    pub loss: f64,
    /// Gradient wrt embeddings with the reversal applied: −λ × the
    /// classifier's true input gradient. Zero when λ = 0.
    pub grad_embeddings_reversed: Mat,
    /// Ordinary descent gradients for the head (not scaled by λ).
    pub grad_weight: Mat,
    pub grad_bias: Vec<f64>,
}

/// Dataset-classification loss with gradient reversal toward the embedding.
///
/// The head always receives its ordinary gradient so it keeps learning;
/// the embedding receives −λ times the input gradient, pushing it toward
/// dataset invariance.
pub fn domain_adaptation_loss(
    embeddings: &Mat,
    dataset_labels: &[u32],
    head: &DomainHeadParams,
    lambda: f64,
) -> Result<DomainLossOut> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("domain loss: lambda must be >= 0, got {lambda}")));
    }
    let b = embeddings.rows();
    if dataset_labels.len() != b {
        return Err(Error::Contract("domain loss: label/batch size mismatch".into()));
    }
    let k = head.n_datasets();
    for &d in dataset_labels {
        if d as usize >= k {
            return Err(Error::Contract(format!(
                "domain loss: dataset label {d} outside head of {k} datasets"
            )));
        }
    }
    let mut logits = embeddings.matmul_bt(&head.weight);
    for i in 0..b {
        for (v, &bia) in logits.row_mut(i).iter_mut().zip(head.bias.iter()) {
            *v += bia;
        }
    }
    let targets: Vec<usize> = dataset_labels.iter().map(|&d| d as usize).collect();
    let (loss, grad_logits) = masked_cross_entropy(&logits, &targets, None)?;
    let grad_weight = grad_logits.matmul_at(embeddings);
    let mut grad_bias = vec![0.0; k];
    for i in 0..b {
        for (g, &v) in grad_bias.iter_mut().zip(grad_logits.row(i).iter()) {
            *g += v;
        }
    }
    let mut grad_embeddings_reversed = grad_logits.matmul(&head.weight);
    grad_embeddings_reversed.scale(-lambda);
    Ok(DomainLossOut {
        loss,
        grad_embeddings_reversed,
        grad_weight,
        grad_bias,
    })
}
