//! Closed-form gradients of the joint objective and a central-difference checker.
//!
//! Backward pass, per modality `m` and subject `i`, with `R = A - Psi S Psi^T`,
//! `B = unvec(beta)` and `delta_i = sigmoid(a_i) - y_i`:
//!
//! ```text
//! dS_i      = -2 mu sum_m Psi^T R Psi                  (symmetrized)
//! dPsi     += -2 mu (R + R^T) Psi S  +  delta_i alpha_m A Psi (B + B^T)
//! dbeta    += delta_i v_i,   dbias += delta_i,   dalpha_m += delta_i beta^T e_m
//! dP_pk     = (dPsi_pk - sum_j dPsi_pj Psi_pj) / (rowsum_p + eps)
//! dW_l      = (W_1..W_{l-1})^T dP (W_{l+1}..W_L)^T,   dWraw_l = dW_l * [Wraw_l > 0]
//! dlogits   = alpha * (dalpha - alpha . dalpha)
//! ```

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::MultimodalGraphDataset;
use crate::error::{Error, Result};
use crate::model::{
    check_subset, effective_bias, logistic_loss, relu, row_normalize, sigmoid, softmax,
    total_loss, unvec_col_major, vec_col_major, HyperParams, LossParts, ModelParams,
};

/// Gradient of the objective, block for block the shape of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub raw_factors: Vec<Vec<Array2<f64>>>,
    pub interactions: Vec<Array2<f64>>,
    pub beta: Array1<f64>,
    pub bias: f64,
    pub alpha_logits: Array1<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            raw_factors: params
                .raw_factors
                .iter()
                .map(|f| f.iter().map(|w| Array2::zeros(w.dim())).collect())
                .collect(),
            interactions: params
                .interactions
                .iter()
                .map(|s| Array2::zeros(s.dim()))
                .collect(),
            beta: Array1::zeros(params.beta.len()),
            bias: 0.0,
            alpha_logits: Array1::zeros(params.alpha_logits.len()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.raw_factors.iter().flatten().all(|w| w.iter().all(|v| v.is_finite()))
            && self.interactions.iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self.beta.iter().all(|v| v.is_finite())
            && self.bias.is_finite()
            && self.alpha_logits.iter().all(|v| v.is_finite())
    }

    /// `<self, other>` summed over every block.
    pub fn dot(&self, other: &GradientSet) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.raw_factors.iter().flatten().zip(other.raw_factors.iter().flatten()) {
            acc += (a * b).sum();
        }
        for (a, b) in self.interactions.iter().zip(&other.interactions) {
            acc += (a * b).sum();
        }
        acc + self.beta.dot(&other.beta)
            + self.bias * other.bias
            + self.alpha_logits.dot(&other.alpha_logits)
    }
}

/// Forward quantities of one modality's membership map.
struct MembershipTape {
    /// `relu(W_l)`.
    active: Vec<Array2<f64>>,
    row_mass: Array1<f64>,
    psi: Array2<f64>,
}

impl MembershipTape {
    fn new(raw: &[Array2<f64>], epsilon: f64) -> Self {
        let active: Vec<Array2<f64>> = raw.iter().map(relu).collect();
        let mut product = active[0].clone();
        for w in &active[1..] {
            product = product.dot(w);
        }
        let row_mass = product.sum_axis(ndarray::Axis(1));
        let psi = row_normalize(product, epsilon).psi;
        Self {
            active,
            row_mass,
            psi,
        }
    }

    /// Pulls `dL/dPsi` back to every raw factor.
    fn backward(&self, raw: &[Array2<f64>], d_psi: &Array2<f64>, epsilon: f64) -> Vec<Array2<f64>> {
        let mut d_product = d_psi.clone();
        for (p, mut row) in d_product.rows_mut().into_iter().enumerate() {
            let centered = d_psi.row(p).dot(&self.psi.row(p));
            let denom = self.row_mass[p] + epsilon;
            row.mapv_inplace(|g| (g - centered) / denom);
        }

        let depth = self.active.len();
        // prefix[l] = W_1..W_l (prefix[0] unused), suffix[l] = W_{l+1}..W_L.
        let mut suffix: Vec<Option<Array2<f64>>> = vec![None; depth];
        for l in (0..depth.saturating_sub(1)).rev() {
            suffix[l] = Some(match &suffix[l + 1] {
                Some(next) => self.active[l + 1].dot(next),
                None => self.active[l + 1].clone(),
            });
        }
        let mut grads = Vec::with_capacity(depth);
        let mut prefix: Option<Array2<f64>> = None;
        for l in 0..depth {
            let left = match &prefix {
                Some(pre) => pre.t().dot(&d_product),
                None => d_product.clone(),
            };
            let mut g = match &suffix[l] {
                Some(suf) => left.dot(&suf.t()),
                None => left,
            };
            Zip::from(&mut g).and(&raw[l]).for_each(|gv, &w| {
                if w <= 0.0 {
                    *gv = 0.0;
                }
            });
            grads.push(g);
            prefix = Some(match prefix {
                Some(pre) => pre.dot(&self.active[l]),
                None => self.active[l].clone(),
            });
        }
        grads
    }
}

struct SubjectTerms {
    recon: f64,
    cls: f64,
    d_s: Array2<f64>,
    d_psi: Vec<Array2<f64>>,
    delta: f64,
    features: Array1<f64>,
    /// `beta^T e_m` per modality.
    beta_dot_enc: Vec<f64>,
}

/// Loss parts and gradients on `subset`. Interaction matrices of subjects outside
/// the subset get zero gradient.
pub fn loss_gradients(
    params: &ModelParams,
    dataset: &MultimodalGraphDataset,
    subset: &[usize],
    hyper: &HyperParams,
) -> Result<(LossParts, GradientSet)> {
    check_subset(dataset, subset)?;
    params.check_against(dataset)?;
    let eps = hyper.row_norm_epsilon;
    let r = params.communities();
    let tapes: Vec<MembershipTape> = params
        .raw_factors
        .iter()
        .map(|raw| MembershipTape::new(raw, eps))
        .collect();
    let alpha = softmax(&params.alpha_logits);
    let bias = effective_bias(params, hyper);
    let b_mat = unvec_col_major(&params.beta, r);
    let b_sym = &b_mat + &b_mat.t();
    let mu = hyper.mu;

    let terms = subset
        .par_iter()
        .map(|&i| {
            let s = &params.interactions[i];
            let s_sym = (s + &s.t()) / 2.0;
            let mut recon = 0.0;
            let mut d_s = Array2::<f64>::zeros((r, r));
            let mut d_psi = Vec::with_capacity(tapes.len());
            let mut features = Array1::<f64>::zeros(r * r);
            let mut encodings = Vec::with_capacity(tapes.len());
            let mut a_psis = Vec::with_capacity(tapes.len());
            for (m, tape) in tapes.iter().enumerate() {
                let psi = &tape.psi;
                let a = dataset.matrix(i, m);
                let psi_s = psi.dot(&s_sym);
                let mut resid = a - &psi_s.dot(&psi.t());
                crate::dataio::symmetrize_in_place(&mut resid);
                recon += resid.mapv(|x| x * x).sum();
                let resid_psi = resid.dot(psi);
                d_s.scaled_add(-2.0 * mu, &psi.t().dot(&resid_psi));
                // R symmetric: -2 mu (R + R^T) Psi S = -4 mu R Psi S
                d_psi.push(resid_psi.dot(&s_sym) * (-4.0 * mu));

                let a_psi = a.dot(psi);
                let enc = vec_col_major(psi.t().dot(&a_psi).view());
                features.scaled_add(alpha[m], &enc);
                encodings.push(enc);
                a_psis.push(a_psi);
            }
            let d_s = (&d_s + &d_s.t()) / 2.0;

            let (cls, delta) = if hyper.supervision_on {
                let y = f64::from(dataset.label(i));
                let act = params.beta.dot(&features) + bias;
                (logistic_loss(y, act), sigmoid(act) - y)
            } else {
                (0.0, 0.0)
            };
            let mut beta_dot_enc = Vec::with_capacity(tapes.len());
            for (m, enc) in encodings.iter().enumerate() {
                beta_dot_enc.push(params.beta.dot(enc));
                if delta != 0.0 {
                    // A symmetric: A Psi G^T + A^T Psi G = A Psi (G + G^T)
                    d_psi[m].scaled_add(delta * alpha[m], &a_psis[m].dot(&b_sym));
                }
            }
            SubjectTerms {
                recon,
                cls,
                d_s,
                d_psi,
                delta,
                features,
                beta_dot_enc,
            }
        })
        .collect::<Vec<_>>();

    let mut grads = GradientSet::zeros_like(params);
    let mut recon = 0.0;
    let mut cls = 0.0;
    let mut d_psi: Vec<Array2<f64>> = tapes.iter().map(|t| Array2::zeros(t.psi.dim())).collect();
    let mut d_alpha = Array1::<f64>::zeros(alpha.len());
    for (&i, t) in subset.iter().zip(&terms) {
        recon += t.recon;
        cls += t.cls;
        grads.interactions[i] += &t.d_s;
        for (acc, d) in d_psi.iter_mut().zip(&t.d_psi) {
            *acc += d;
        }
        grads.beta.scaled_add(t.delta, &t.features);
        grads.bias += t.delta;
        for (m, bde) in t.beta_dot_enc.iter().enumerate() {
            d_alpha[m] += t.delta * bde;
        }
    }
    if !hyper.use_bias {
        grads.bias = 0.0;
    }
    let centered = alpha.dot(&d_alpha);
    grads.alpha_logits = &alpha * &d_alpha.mapv(|g| g - centered);
    for (m, tape) in tapes.iter().enumerate() {
        grads.raw_factors[m] = tape.backward(&params.raw_factors[m], &d_psi[m], eps);
    }

    let loss = LossParts {
        total: mu * recon + cls,
        recon,
        cls,
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub pass: bool,
    pub h: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Raw factor entries within `10 h` of the ReLU kink.
    pub skipped: usize,
    pub blocks: BTreeMap<String, BlockCheck>,
}

fn block_names(params: &ModelParams) -> Vec<String> {
    let mut names = Vec::new();
    for (m, f) in params.raw_factors.iter().enumerate() {
        for l in 0..f.len() {
            names.push(format!("factor[{m}][{l}]"));
        }
    }
    for i in 0..params.interactions.len() {
        names.push(format!("interaction[{i}]"));
    }
    names.extend(["beta".to_string(), "bias".into(), "alpha_logits".into()]);
    names
}

fn param_blocks_mut(params: &mut ModelParams) -> Vec<&mut [f64]> {
    let mut blocks: Vec<&mut [f64]> = Vec::new();
    for w in params.raw_factors.iter_mut().flatten() {
        blocks.push(w.as_slice_mut().expect("standard layout"));
    }
    for s in params.interactions.iter_mut() {
        blocks.push(s.as_slice_mut().expect("standard layout"));
    }
    blocks.push(params.beta.as_slice_mut().expect("standard layout"));
    blocks.push(std::slice::from_mut(&mut params.bias));
    blocks.push(params.alpha_logits.as_slice_mut().expect("standard layout"));
    blocks
}

fn grad_blocks(grads: &GradientSet) -> Vec<Vec<f64>> {
    let mut blocks = Vec::new();
    for w in grads.raw_factors.iter().flatten() {
        blocks.push(w.iter().copied().collect());
    }
    for s in &grads.interactions {
        blocks.push(s.iter().copied().collect());
    }
    blocks.push(grads.beta.to_vec());
    blocks.push(vec![grads.bias]);
    blocks.push(grads.alpha_logits.to_vec());
    blocks
}

/// Compares analytic gradients with `(F(x + h e_j) - F(x - h e_j)) / 2h` for every
/// scalar parameter, using `|g - fd| / max(|g|, |fd|, 1e-8)`.
pub fn finite_difference_check(
    params: &ModelParams,
    dataset: &MultimodalGraphDataset,
    subset: &[usize],
    hyper: &HyperParams,
    h: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, grads) = loss_gradients(params, dataset, subset, hyper)?;
    let analytic = grad_blocks(&grads);
    let names = block_names(params);
    let n_factor_blocks: usize = params.raw_factors.iter().map(Vec::len).sum();

    let mut work = params.clone();
    let mut blocks = BTreeMap::new();
    let (mut checked_total, mut skipped_total) = (0, 0);
    let mut worst = 0.0f64;
    for b in 0..analytic.len() {
        let mut block = BlockCheck {
            max_relative_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        let len = analytic[b].len();
        for j in 0..len {
            let x = param_blocks_mut(&mut work)[b][j];
            if b < n_factor_blocks && x.abs() < 10.0 * h {
                block.skipped += 1;
                continue;
            }
            param_blocks_mut(&mut work)[b][j] = x + h;
            let plus = total_loss(&work, dataset, subset, hyper)?.total;
            param_blocks_mut(&mut work)[b][j] = x - h;
            let minus = total_loss(&work, dataset, subset, hyper)?.total;
            param_blocks_mut(&mut work)[b][j] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NumericalFailure {
                    iteration: 0,
                    loss: if plus.is_finite() { minus } else { plus },
                });
            }
            let fd = (plus - minus) / (2.0 * h);
            let g = analytic[b][j];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            block.max_relative_error = block.max_relative_error.max(rel);
            block.checked += 1;
        }
        worst = worst.max(block.max_relative_error);
        checked_total += block.checked;
        skipped_total += block.skipped;
        blocks.insert(names[b].clone(), block);
    }
    Ok(FdReport {
        max_relative_error: worst,
        pass: worst < tolerance,
        h,
        tolerance,
        checked: checked_total,
        skipped: skipped_total,
        blocks,
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let m = random_matrix(rng, n, n, -1.0, 1.0);
    (&m + &m.t()) / 2.0
}

/// Random dense instance for gradient checks, with symmetric uniform matrices
/// and alternating labels. Inner factors are uniform in `[-0.5, 1)` with at
/// least two positive entries per row and the last factor is uniform in
/// `[0.1, 1)`, so every membership entry is strictly positive. A row with a
/// single active entry would be invisible to the loss (row normalization is
/// scale invariant) apart from the `epsilon` term.
pub fn random_instance(
    seed: u64,
    n: usize,
    widths: &[usize],
    modalities: usize,
    subjects: usize,
) -> (MultimodalGraphDataset, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = *widths.last().unwrap();
    let adjacency = (0..subjects)
        .map(|_| (0..modalities).map(|_| random_symmetric(&mut rng, n)).collect())
        .collect();
    let labels = (0..subjects).map(|i| (i % 2) as u8).collect();
    let dataset = MultimodalGraphDataset::new(
        (0..modalities).map(|m| format!("m{m}")).collect(),
        (0..subjects).map(|i| format!("s{i}")).collect(),
        adjacency,
        labels,
    )
    .unwrap();
    let raw_factors = (0..modalities)
        .map(|_| {
            let mut prev = n;
            widths
                .iter()
                .enumerate()
                .map(|(l, &w)| {
                    let f = if l + 1 == widths.len() {
                        random_matrix(&mut rng, prev, w, 0.1, 1.0)
                    } else {
                        let mut f = random_matrix(&mut rng, prev, w, -0.5, 1.0);
                        let need = w.min(2);
                        for mut row in f.rows_mut() {
                            while row.iter().filter(|&&v| v > 0.0).count() < need {
                                let j = rng.random_range(0..w);
                                if row[j] <= 0.0 {
                                    row[j] = rng.random_range(0.1..1.0);
                                }
                            }
                        }
                        f
                    };
                    prev = w;
                    f
                })
                .collect()
        })
        .collect();
    let params = ModelParams {
        raw_factors,
        interactions: (0..subjects).map(|_| random_symmetric(&mut rng, r)).collect(),
        beta: Array1::from_shape_fn(r * r, |_| rng.random_range(-0.5..0.5)),
        bias: 0.3,
        alpha_logits: Array1::from_shape_fn(modalities, |_| rng.random_range(-1.0..1.0)),
    };
    (dataset, params)
}
