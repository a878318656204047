//! Parameters, constraint reparameterizations, forward passes and the joint loss.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{symmetrize_in_place, MultimodalGraphDataset};
use crate::error::{Error, Result};

/// Flattening order of `vec(Psi^T A Psi)`; stored in checkpoints.
pub const FLATTENING_ORDER: &str = "col-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Layer widths `r_1, ..., r_L`; the last one is the community count.
    pub widths: Vec<usize>,
    /// Weight of the reconstruction term.
    pub mu: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Scale of the orthogonal factor initialization.
    pub init_scale: f64,
    /// When false only the reconstruction term is optimized.
    pub supervision_on: bool,
    pub log_interval: usize,
    pub seed: u64,
    pub row_norm_epsilon: f64,
    /// When false the classifier offset is pinned to zero.
    pub use_bias: bool,
    /// Mini-batch size; `None` means full-batch descent.
    pub batch_size: Option<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            widths: vec![30, 20, 10],
            mu: 1.0,
            learning_rate: 1e-5,
            max_iters: 30_000,
            init_scale: 1e-3,
            supervision_on: true,
            log_interval: 100,
            seed: 0,
            row_norm_epsilon: 1e-12,
            use_bias: true,
            batch_size: None,
        }
    }
}

impl HyperParams {
    pub fn communities(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "widths must be a nonempty list of positive integers, got {:?}",
                self.widths
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init scale must be positive, got {}",
                self.init_scale
            )));
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidArgument("log interval must be positive".into()));
        }
        if !(self.row_norm_epsilon > 0.0) {
            return Err(Error::InvalidArgument("row normalization epsilon must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `raw_factors[m][l]` is the unconstrained factor of layer `l` for modality `m`,
    /// shaped `r_{l-1} x r_l` with `r_0 = n`.
    pub raw_factors: Vec<Vec<Array2<f64>>>,
    /// One signed symmetric `r x r` interaction matrix per subject of the dataset.
    pub interactions: Vec<Array2<f64>>,
    /// Classifier weights over the column-major `vec` of the fused `r x r` summary.
    pub beta: Array1<f64>,
    pub bias: f64,
    pub alpha_logits: Array1<f64>,
}

impl ModelParams {
    pub fn n_modalities(&self) -> usize {
        self.raw_factors.len()
    }

    pub fn communities(&self) -> usize {
        self.raw_factors
            .first()
            .and_then(|f| f.last())
            .map(|w| w.ncols())
            .unwrap_or(0)
    }

    pub fn alpha(&self) -> Array1<f64> {
        softmax(&self.alpha_logits)
    }

    pub fn memberships(&self, epsilon: f64) -> Result<Vec<EffectiveMembership>> {
        self.raw_factors
            .iter()
            .map(|f| effective_membership(f, epsilon))
            .collect()
    }

    /// Checks every block shape against the dataset.
    pub fn check_against(&self, dataset: &MultimodalGraphDataset) -> Result<()> {
        if self.n_modalities() != dataset.n_modalities() {
            return Err(Error::ShapeMismatch(format!(
                "parameters have {} modalities, dataset has {}",
                self.n_modalities(),
                dataset.n_modalities()
            )));
        }
        let r = self.communities();
        for (m, factors) in self.raw_factors.iter().enumerate() {
            check_chain(factors)?;
            if factors[0].nrows() != dataset.n() {
                return Err(Error::ShapeMismatch(format!(
                    "modality {m}: first factor has {} rows, dataset has n = {}",
                    factors[0].nrows(),
                    dataset.n()
                )));
            }
            if factors.last().map(|w| w.ncols()) != Some(r) {
                return Err(Error::ShapeMismatch(format!(
                    "modality {m}: community count differs from modality 0"
                )));
            }
        }
        if self.interactions.len() != dataset.n_subjects() {
            return Err(Error::ShapeMismatch(format!(
                "{} interaction matrices for {} subjects",
                self.interactions.len(),
                dataset.n_subjects()
            )));
        }
        if let Some(s) = self.interactions.iter().find(|s| s.dim() != (r, r)) {
            return Err(Error::ShapeMismatch(format!(
                "interaction matrix is {:?}, expected ({r}, {r})",
                s.dim()
            )));
        }
        if self.beta.len() != r * r {
            return Err(Error::ShapeMismatch(format!(
                "beta has length {}, expected {}",
                self.beta.len(),
                r * r
            )));
        }
        if self.alpha_logits.len() != self.n_modalities() {
            return Err(Error::ShapeMismatch(format!(
                "{} alpha logits for {} modalities",
                self.alpha_logits.len(),
                self.n_modalities()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.raw_factors.iter().flatten().all(|w| w.iter().all(|v| v.is_finite()))
            && self.interactions.iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self.beta.iter().all(|v| v.is_finite())
            && self.bias.is_finite()
            && self.alpha_logits.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_chain(factors: &[Array2<f64>]) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::ShapeMismatch("no factor matrices".into()));
    }
    for (l, pair) in factors.windows(2).enumerate() {
        if pair[0].ncols() != pair[1].nrows() {
            return Err(Error::ShapeMismatch(format!(
                "factor {l} is {:?} but factor {} is {:?}",
                pair[0].dim(),
                l + 1,
                pair[1].dim()
            )));
        }
    }
    Ok(())
}

/// Row-stochastic nonnegative membership map of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMembership {
    pub psi: Array2<f64>,
    /// Rows whose mass before normalization was at most epsilon.
    pub degenerate_rows: Vec<usize>,
}

pub fn relu(w: &Array2<f64>) -> Array2<f64> {
    w.mapv(|v| v.max(0.0))
}

/// `Psi = rownorm(relu(W_1) relu(W_2) ... relu(W_L))`, each row divided by `sum + epsilon`.
pub fn effective_membership(raw_factors: &[Array2<f64>], epsilon: f64) -> Result<EffectiveMembership> {
    check_chain(raw_factors)?;
    if raw_factors.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite factor entry".into()));
    }
    let mut product = relu(&raw_factors[0]);
    for w in &raw_factors[1..] {
        product = product.dot(&relu(w));
    }
    Ok(row_normalize(product, epsilon))
}

pub(crate) fn row_normalize(mut product: Array2<f64>, epsilon: f64) -> EffectiveMembership {
    let mut degenerate_rows = Vec::new();
    for (p, mut row) in product.rows_mut().into_iter().enumerate() {
        let mass = row.sum();
        if mass <= epsilon {
            degenerate_rows.push(p);
        }
        row.mapv_inplace(|v| v / (mass + epsilon));
    }
    EffectiveMembership {
        psi: product,
        degenerate_rows,
    }
}

/// `Psi S Psi^T`, symmetrized so both triangles agree bit for bit.
pub fn decode(psi: &Array2<f64>, s: &Array2<f64>) -> Result<Array2<f64>> {
    let r = psi.ncols();
    if s.dim() != (r, r) {
        return Err(Error::ShapeMismatch(format!(
            "membership has {r} columns but interaction matrix is {:?}",
            s.dim()
        )));
    }
    let mut out = psi.dot(s).dot(&psi.t());
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// Column-major `vec(Psi^T A Psi)`.
pub fn encode(psi: &Array2<f64>, a: &Array2<f64>) -> Result<Array1<f64>> {
    let n = psi.nrows();
    if a.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "membership has {n} rows but adjacency is {:?}",
            a.dim()
        )));
    }
    Ok(vec_col_major(psi.t().dot(a).dot(psi).view()))
}

pub fn vec_col_major(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.t().iter().copied().collect()
}

/// Inverse of [`vec_col_major`] for a square `r x r` block.
pub fn unvec_col_major(v: &Array1<f64>, r: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, r), |(k, l)| v[k + l * r])
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

/// `v = sum_m softmax(logits)_m e_m`.
pub fn fuse(encodings: &[Array1<f64>], alpha_logits: &Array1<f64>) -> Result<Array1<f64>> {
    if encodings.is_empty() || encodings.len() != alpha_logits.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} encodings for {} fusion logits",
            encodings.len(),
            alpha_logits.len()
        )));
    }
    let len = encodings[0].len();
    if encodings.iter().any(|e| e.len() != len) {
        return Err(Error::ShapeMismatch("encodings differ in length".into()));
    }
    let alpha = softmax(alpha_logits);
    let mut v = Array1::zeros(len);
    for (e, &w) in encodings.iter().zip(alpha.iter()) {
        v.scaled_add(w, e);
    }
    Ok(v)
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^a)` without overflow.
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Logistic loss `ln(1 + e^a) - y a`.
pub fn logistic_loss(y: f64, a: f64) -> f64 {
    softplus(a) - y * a
}

pub fn predict(v: &Array1<f64>, beta: &Array1<f64>, bias: f64) -> Result<f64> {
    if v.len() != beta.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature length {} vs classifier length {}",
            v.len(),
            beta.len()
        )));
    }
    Ok(sigmoid(beta.dot(v) + bias))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `mu * recon + cls`.
    pub total: f64,
    /// Unweighted sum of squared Frobenius residuals.
    pub recon: f64,
    /// Sum of logistic losses; zero when supervision is off.
    pub cls: f64,
}

pub(crate) fn effective_bias(params: &ModelParams, hyper: &HyperParams) -> f64 {
    if hyper.use_bias {
        params.bias
    } else {
        0.0
    }
}

pub(crate) fn check_subset(dataset: &MultimodalGraphDataset, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= dataset.n_subjects()) {
        return Err(Error::InvalidArgument(format!(
            "subject index {bad} out of range for {} subjects",
            dataset.n_subjects()
        )));
    }
    Ok(())
}

/// Fused feature vector of one subject.
pub fn fused_features(
    psis: &[Array2<f64>],
    dataset: &MultimodalGraphDataset,
    subject: usize,
    alpha_logits: &Array1<f64>,
) -> Result<Array1<f64>> {
    let encodings = psis
        .iter()
        .zip(dataset.views(subject))
        .map(|(psi, a)| encode(psi, a))
        .collect::<Result<Vec<_>>>()?;
    fuse(&encodings, alpha_logits)
}

/// Joint objective on a subject subset.
pub fn total_loss(
    params: &ModelParams,
    dataset: &MultimodalGraphDataset,
    subset: &[usize],
    hyper: &HyperParams,
) -> Result<LossParts> {
    check_subset(dataset, subset)?;
    params.check_against(dataset)?;
    let psis: Vec<Array2<f64>> = params
        .memberships(hyper.row_norm_epsilon)?
        .into_iter()
        .map(|e| e.psi)
        .collect();
    let bias = effective_bias(params, hyper);
    let per_subject = subset
        .par_iter()
        .map(|&i| -> Result<(f64, f64)> {
            let s = &params.interactions[i];
            let mut recon = 0.0;
            for (psi, a) in psis.iter().zip(dataset.views(i)) {
                let approx = decode(psi, s)?;
                recon += (a - &approx).mapv(|x| x * x).sum();
            }
            let cls = if hyper.supervision_on {
                let v = fused_features(&psis, dataset, i, &params.alpha_logits)?;
                logistic_loss(f64::from(dataset.label(i)), params.beta.dot(&v) + bias)
            } else {
                0.0
            };
            Ok((recon, cls))
        })
        .collect::<Result<Vec<_>>>()?;
    let (recon, cls) = per_subject
        .iter()
        .fold((0.0, 0.0), |(r, c), &(ri, ci)| (r + ri, c + ci));
    Ok(LossParts {
        total: hyper.mu * recon + cls,
        recon,
        cls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub per_modality: usize,
    pub interaction: usize,
    pub classifier: usize,
    pub total: usize,
}

/// Counts factor entries per modality, `N r^2` interaction entries and the
/// `r^2 + 1` classifier weights. Fusion logits are not included.
pub fn parameter_count(n: usize, widths: &[usize], modalities: usize, subjects: usize) -> ParameterCount {
    let mut per_modality = 0;
    let mut prev = n;
    for &w in widths {
        per_modality += prev * w;
        prev = w;
    }
    let r = widths.last().copied().unwrap_or(0);
    let interaction = subjects * r * r;
    let classifier = r * r + 1;
    ParameterCount {
        per_modality,
        interaction,
        classifier,
        total: modalities * per_modality + interaction + classifier,
    }
}
