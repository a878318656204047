//! Planted-community multimodal datasets with known ground truth, and the
//! oracles used to score recovered memberships against them.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{symmetrize_in_place, MultimodalGraphDataset};
use crate::error::{Error, Result};
use crate::model::{decode, vec_col_major, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n: usize,
    pub r: usize,
    pub modalities: usize,
    pub subjects: usize,
    /// Standard deviation of the symmetric Gaussian noise added to every `A`.
    pub noise_sigma: f64,
    /// Frobenius distance between the class means of `S_i`.
    pub label_signal: f64,
    pub seed: u64,
    /// Per-subject symmetric Gaussian jitter of `S_i`.
    pub interaction_noise: f64,
    /// Multiplier of the shared interaction matrix `S_base`.
    pub base_scale: f64,
    /// Optional per-modality multipliers of `noise_sigma`; empty means all 1.
    pub modality_noise_scale: Vec<f64>,
}

impl PlantedConfig {
    pub fn new(
        n: usize,
        r: usize,
        modalities: usize,
        subjects: usize,
        noise_sigma: f64,
        label_signal: f64,
        seed: u64,
    ) -> Self {
        Self {
            n,
            r,
            modalities,
            subjects,
            noise_sigma,
            label_signal,
            seed,
            interaction_noise: 0.1,
            base_scale: 1.0,
            modality_noise_scale: Vec::new(),
        }
    }

    fn noise_for(&self, m: usize) -> f64 {
        self.noise_sigma * self.modality_noise_scale.get(m).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGroundTruth {
    /// Per modality, row-stochastic separable `n x r` membership.
    pub psi_true: Vec<Array2<f64>>,
    /// Per modality, the anchor node of each community.
    pub anchors: Vec<Vec<usize>>,
    pub s_true: Vec<Array2<f64>>,
    pub s_base: Array2<f64>,
    /// Unit-Frobenius symmetric class direction.
    pub direction: Array2<f64>,
    /// Column-major `vec(direction)`.
    pub beta_true: Array1<f64>,
    pub labels: Vec<u8>,
    pub noise_sigma: f64,
}

fn gaussian_symmetric(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v: f64 = rng.sample(StandardNormal);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

/// Anchor rows are standard basis vectors at random nodes; the other rows are
/// symmetric Dirichlet(1) draws.
fn separable_membership(rng: &mut impl Rng, n: usize, r: usize) -> (Array2<f64>, Vec<usize>) {
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let anchors = nodes[..r].to_vec();
    let mut psi = Array2::<f64>::zeros((n, r));
    for p in 0..n {
        if let Some(k) = anchors.iter().position(|&a| a == p) {
            psi[[p, k]] = 1.0;
        } else {
            let draws: Vec<f64> = (0..r).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = draws.iter().sum();
            for (k, d) in draws.into_iter().enumerate() {
                psi[[p, k]] = d / total;
            }
        }
    }
    (psi, anchors)
}

/// Builds `A_i^m = Psi^m S_i Psi^m^T + sigma_m G` with
/// `S_i = S_base + y_i * label_signal * D + E_i`.
pub fn generate_planted_dataset(config: &PlantedConfig) -> Result<(MultimodalGraphDataset, PlantedGroundTruth)> {
    let PlantedConfig {
        n,
        r,
        modalities,
        subjects,
        ..
    } = *config;
    if n < r {
        return Err(Error::InvalidArgument(format!("n < r ({n} < {r})")));
    }
    if r < 2 || modalities == 0 || subjects == 0 {
        return Err(Error::InvalidArgument(format!(
            "need r >= 2, at least one modality and at least one subject \
             (r = {r}, modalities = {modalities}, subjects = {subjects})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut psi_true = Vec::with_capacity(modalities);
    let mut anchors = Vec::with_capacity(modalities);
    for _ in 0..modalities {
        let (psi, a) = separable_membership(&mut rng, n, r);
        psi_true.push(psi);
        anchors.push(a);
    }

    // Strictly diagonally dominant, hence full rank with eigenvalues >= 0.5.
    let off = 0.5 / (r - 1) as f64;
    let mut s_base = Array2::<f64>::zeros((r, r));
    for k in 0..r {
        s_base[[k, k]] = rng.random_range(1.0..2.0);
        for l in (k + 1)..r {
            let v = rng.random_range(-off..off);
            s_base[[k, l]] = v;
            s_base[[l, k]] = v;
        }
    }
    s_base *= config.base_scale;
    let mut direction = gaussian_symmetric(&mut rng, r);
    let norm = direction.mapv(|v| v * v).sum().sqrt();
    direction /= norm;

    // Balanced; an odd count puts the extra subject in class 1.
    let mut labels: Vec<u8> = (0..subjects).map(|i| u8::from(i >= subjects / 2)).collect();
    labels.shuffle(&mut rng);

    let mut s_true = Vec::with_capacity(subjects);
    let mut adjacency = Vec::with_capacity(subjects);
    for &y in &labels {
        let mut s = s_base.clone();
        s.scaled_add(f64::from(y) * config.label_signal, &direction);
        if config.interaction_noise > 0.0 {
            s.scaled_add(config.interaction_noise, &gaussian_symmetric(&mut rng, r));
        }
        let mut views = Vec::with_capacity(modalities);
        for (m, psi) in psi_true.iter().enumerate() {
            let mut a = decode(psi, &s)?;
            let sigma = config.noise_for(m);
            if sigma > 0.0 {
                a.scaled_add(sigma, &gaussian_symmetric(&mut rng, n));
            }
            symmetrize_in_place(&mut a);
            views.push(a);
        }
        s_true.push(s);
        adjacency.push(views);
    }

    let dataset = MultimodalGraphDataset::new(
        (0..modalities).map(|m| format!("m{m}")).collect(),
        (0..subjects).map(|i| format!("s{i:04}")).collect(),
        adjacency,
        labels.clone(),
    )?;
    let truth = PlantedGroundTruth {
        beta_true: vec_col_major(direction.view()),
        psi_true,
        anchors,
        s_true,
        s_base,
        direction,
        labels,
        noise_sigma: config.noise_sigma,
    };
    Ok((dataset, truth))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[derive(Serialize)]
struct GroundTruthFile<'a> {
    config: &'a PlantedConfig,
    psi_true: Vec<Vec<Vec<f64>>>,
    anchors: &'a [Vec<usize>],
    s_true: Vec<Vec<Vec<f64>>>,
    s_base: Vec<Vec<f64>>,
    direction: Vec<Vec<f64>>,
    beta_true: Vec<f64>,
    labels: &'a [u8],
    noise_sigma: f64,
}

impl PlantedGroundTruth {
    pub fn write_json(&self, config: &PlantedConfig, path: &Path) -> Result<()> {
        let file = GroundTruthFile {
            config,
            psi_true: self.psi_true.iter().map(rows).collect(),
            anchors: &self.anchors,
            s_true: self.s_true.iter().map(rows).collect(),
            s_base: rows(&self.s_base),
            direction: rows(&self.direction),
            beta_true: self.beta_true.to_vec(),
            labels: &self.labels,
            noise_sigma: self.noise_sigma,
        };
        let json = serde_json::to_string_pretty(&file).expect("ground truth serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `permutation[k]` is the learned column matched to true column `k`.
    pub permutation: Vec<usize>,
    pub mean_column_correlation: f64,
    pub membership_agreement: f64,
    /// Learned columns with zero variance, whose correlations are reported as 0.
    pub degenerate_columns: Vec<usize>,
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.is_empty() || is_constant(x) || is_constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let denom = (sxx * syy).sqrt();
    (denom > 0.0).then(|| sxy / denom)
}

/// `corr[k][j]` = Pearson correlation of true column `k` and learned column `j`.
pub fn correlation_matrix(psi_learned: &Array2<f64>, psi_true: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
    let r = psi_true.ncols();
    let learned: Vec<Vec<f64>> = psi_learned.columns().into_iter().map(|c| c.to_vec()).collect();
    let truth: Vec<Vec<f64>> = psi_true.columns().into_iter().map(|c| c.to_vec()).collect();
    let mut degenerate = Vec::new();
    let mut corr = Array2::<f64>::zeros((r, r));
    for (j, lc) in learned.iter().enumerate() {
        let mut column_ok = true;
        for (k, tc) in truth.iter().enumerate() {
            match pearson(tc, lc) {
                Some(c) => corr[[k, j]] = c,
                None => column_ok = false,
            }
        }
        if !column_ok && is_constant(lc) {
            degenerate.push(j);
        }
    }
    (corr, degenerate)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Maximizes `sum_k score[k][perm[k]]` by enumerating all permutations.
pub fn best_permutation_exhaustive(score: &Array2<f64>) -> Vec<usize> {
    let r = score.nrows();
    let mut perm: Vec<usize> = (0..r).collect();
    let mut best = perm.clone();
    let mut best_value = f64::NEG_INFINITY;
    loop {
        let value: f64 = perm.iter().enumerate().map(|(k, &j)| score[[k, j]]).sum();
        if value > best_value {
            best_value = value;
            best = perm.clone();
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best
}

/// Maximizes `sum_k score[k][perm[k]]` with the O(r^3) shortest augmenting path
/// Hungarian algorithm on the cost `-score`.
pub fn best_permutation_hungarian(score: &Array2<f64>) -> Vec<usize> {
    let n = score.nrows();
    let cost = |i: usize, j: usize| -score[[i - 1, j - 1]];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[j]: row assigned to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Exhaustive search up to `r = 8`, Hungarian assignment beyond.
pub fn match_and_score(psi_learned: &Array2<f64>, psi_true: &Array2<f64>) -> Result<MatchResult> {
    if psi_learned.dim() != psi_true.dim() {
        return Err(Error::ShapeMismatch(format!(
            "learned membership {:?} vs true membership {:?}",
            psi_learned.dim(),
            psi_true.dim()
        )));
    }
    let r = psi_true.ncols();
    let (corr, degenerate_columns) = correlation_matrix(psi_learned, psi_true);
    let permutation = if r <= 8 {
        best_permutation_exhaustive(&corr)
    } else {
        best_permutation_hungarian(&corr)
    };
    let mean_column_correlation =
        permutation.iter().enumerate().map(|(k, &j)| corr[[k, j]]).sum::<f64>() / r as f64;
    let agree = psi_true
        .rows()
        .into_iter()
        .zip(psi_learned.rows())
        .filter(|(t, l)| permutation[argmax(*t)] == argmax(*l))
        .count();
    Ok(MatchResult {
        permutation,
        mean_column_correlation,
        membership_agreement: agree as f64 / psi_true.nrows() as f64,
        degenerate_columns,
    })
}

/// Per modality, `sum_i ||A - Psi S_i Psi^T||_F^2 / sum_i ||A||_F^2` over all subjects.
pub fn reconstruction_error(
    dataset: &MultimodalGraphDataset,
    params: &ModelParams,
    epsilon: f64,
) -> Result<Vec<f64>> {
    params.check_against(dataset)?;
    let memberships = params.memberships(epsilon)?;
    (0..dataset.n_modalities())
        .map(|m| {
            let psi = &memberships[m].psi;
            let mut resid = 0.0;
            let mut mass = 0.0;
            for i in 0..dataset.n_subjects() {
                let a = dataset.matrix(i, m);
                let approx = decode(psi, &params.interactions[i])?;
                resid += (a - &approx).mapv(|x| x * x).sum();
                mass += a.mapv(|x| x * x).sum();
            }
            if mass == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "modality {} is all zero; relative error undefined",
                    dataset.modality_names()[m]
                )));
            }
            Ok(resid / mass)
        })
        .collect()
}
