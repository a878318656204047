//! Post-hoc readouts of a trained model: hard community assignments, ROI
//! saliency, group-level approximation matrices and discriminative edges.
//!
//! Nodes are 0-based; communities are reported 1-based (`1..=r`).

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::MultimodalGraphDataset;
use crate::error::{Error, Result};
use crate::model::{decode, HyperParams, ModelParams};

/// `|t|` reported for edges whose pooled standard error is zero.
pub const T_STAT_CAP: f64 = 1e6;

pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    /// 1-based dominant community per node.
    pub community: Vec<usize>,
    /// Nodes whose membership row is all zero; assigned community 1.
    pub degenerate: Vec<usize>,
}

/// Row argmax, ties to the lowest community index.
pub fn dominant_communities(psi: &Array2<f64>) -> CommunityAssignment {
    let mut community = Vec::with_capacity(psi.nrows());
    let mut degenerate = Vec::new();
    for (p, row) in psi.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            degenerate.push(p);
        }
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        community.push(best + 1);
    }
    CommunityAssignment {
        community,
        degenerate,
    }
}

fn mean_interaction(group: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let first = group.first().ok_or_else(|| Error::InvalidArgument("empty group".into()))?;
    let mut mean = Array2::<f64>::zeros(first.dim());
    for s in group {
        if s.dim() != first.dim() {
            return Err(Error::ShapeMismatch("interaction matrices differ in shape".into()));
        }
        mean += *s;
    }
    Ok(mean / group.len() as f64)
}

/// `Psi S_bar Psi^T` with `S_bar` the elementwise mean of the group.
pub fn group_approximation(psi: &Array2<f64>, group: &[&Array2<f64>]) -> Result<Array2<f64>> {
    decode(psi, &mean_interaction(group)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Score per node, in node order.
    pub scores: Vec<f64>,
    /// Nodes by descending score, ties by node index.
    pub order: Vec<usize>,
    /// All scores equal: the ordering carries no information.
    pub degenerate: bool,
}

impl Ranking {
    fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let (lo, hi) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        let degenerate = hi - lo <= 1e-12 * hi.abs().max(1.0);
        Self {
            scores,
            order,
            degenerate,
        }
    }

    pub fn top(&self, k: usize) -> Vec<(usize, f64)> {
        self.order.iter().take(k).map(|&p| (p, self.scores[p])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// `sum_l |S_bar[k, l]|` per community.
    pub community_weights: Vec<f64>,
    pub per_modality: Vec<Ranking>,
    pub fused: Ranking,
}

/// Node score `s_p = sum_k Psi[p, k] w_k` with `w_k = sum_l |S_bar[k, l]|` over the
/// target group; the fused score is `sum_m alpha_m s_p^m`.
pub fn roi_saliency(psis: &[Array2<f64>], group: &[&Array2<f64>], alpha: &Array1<f64>) -> Result<SaliencyReport> {
    if psis.is_empty() || psis.len() != alpha.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} memberships for {} fusion weights",
            psis.len(),
            alpha.len()
        )));
    }
    let s_bar = mean_interaction(group)?;
    let weights: Array1<f64> = s_bar.rows().into_iter().map(|row| row.mapv(f64::abs).sum()).collect();
    let n = psis[0].nrows();
    let mut fused = Array1::<f64>::zeros(n);
    let mut per_modality = Vec::with_capacity(psis.len());
    for (psi, &a) in psis.iter().zip(alpha.iter()) {
        if psi.ncols() != weights.len() || psi.nrows() != n {
            return Err(Error::ShapeMismatch(format!("membership shape {:?}", psi.dim())));
        }
        let scores = psi.dot(&weights);
        fused.scaled_add(a, &scores);
        per_modality.push(Ranking::from_scores(scores.to_vec()));
    }
    Ok(SaliencyReport {
        community_weights: weights.to_vec(),
        per_modality,
        fused: Ranking::from_scores(fused.to_vec()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub p: usize,
    pub q: usize,
    /// Mean over class 1 minus mean over class 0.
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    /// Zero pooled standard error: `t` is capped (or 0 when the means agree).
    pub degenerate: bool,
}

/// Sum in sorted order, so the result depends only on the multiset of values.
fn ordered_mean_var(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, sq.iter().sum::<f64>() / (n - 1.0))
}

/// Welch two-sample t-test of `group1` against `group0`, two-sided.
pub fn welch_t_test(group1: &[f64], group0: &[f64]) -> Result<EdgeStat> {
    if group1.len() < 2 || group0.len() < 2 {
        return Err(Error::InvalidArgument(
            "each group needs at least 2 subjects for a variance estimate".into(),
        ));
    }
    let (m1, v1) = ordered_mean_var(&mut group1.to_vec());
    let (m0, v0) = ordered_mean_var(&mut group0.to_vec());
    let (n1, n0) = (group1.len() as f64, group0.len() as f64);
    let diff = m1 - m0;
    let se2 = v1 / n1 + v0 / n0;
    let (t, p_value, degenerate) = if se2 <= 0.0 {
        if diff == 0.0 {
            (0.0, 1.0, true)
        } else {
            (T_STAT_CAP.copysign(diff), 0.0, true)
        }
    } else {
        let t = diff / se2.sqrt();
        let df = se2 * se2 / ((v1 / n1).powi(2) / (n1 - 1.0) + (v0 / n0).powi(2) / (n0 - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (t, 2.0 * dist.sf(t.abs()), false)
    };
    Ok(EdgeStat {
        p: 0,
        q: 0,
        mean_diff: diff,
        t,
        p_value,
        degenerate,
    })
}

/// Welch t-test on every unordered edge `p < q` of the per-subject
/// reconstructions `Psi^m S_i Psi^m^T`, class 1 against class 0, ranked by `|t|`.
pub fn discriminative_edges(
    dataset: &MultimodalGraphDataset,
    params: &ModelParams,
    hyper: &HyperParams,
    modality: usize,
    k: usize,
) -> Result<Vec<EdgeStat>> {
    params.check_against(dataset)?;
    if modality >= dataset.n_modalities() {
        return Err(Error::InvalidArgument(format!("modality index {modality} out of range")));
    }
    let n = dataset.n();
    if k > n * (n - 1) / 2 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} available edges",
            n * (n - 1) / 2
        )));
    }
    let psi = &params.memberships(hyper.row_norm_epsilon)?[modality].psi;
    let recon = params
        .interactions
        .iter()
        .map(|s| decode(psi, s))
        .collect::<Result<Vec<_>>>()?;
    rank_edges(&recon, dataset.labels(), k)
}

/// Edge ranking over arbitrary per-subject matrices.
pub fn rank_edges(matrices: &[Array2<f64>], labels: &[u8], k: usize) -> Result<Vec<EdgeStat>> {
    let n = matrices.first().map(|m| m.nrows()).unwrap_or(0);
    let ones: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let zeros: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for p in 0..n {
        for q in (p + 1)..n {
            let g1: Vec<f64> = ones.iter().map(|&i| matrices[i][[p, q]]).collect();
            let g0: Vec<f64> = zeros.iter().map(|&i| matrices[i][[p, q]]).collect();
            let mut stat = welch_t_test(&g1, &g0)?;
            stat.p = p;
            stat.q = q;
            edges.push(stat);
        }
    }
    edges.sort_by(|a, b| b.t.abs().total_cmp(&a.t.abs()).then((a.p, a.q).cmp(&(b.p, b.q))));
    edges.truncate(k);
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dominant_community_examples() {
        assert_eq!(dominant_communities(&Array2::eye(3)).community, vec![1, 2, 3]);
        assert_eq!(dominant_communities(&array![[0.5, 0.5]]).community, vec![1]);
        let c = dominant_communities(&array![[0.2, 0.8], [0.9, 0.1], [0.4, 0.6]]);
        assert_eq!(c.community, vec![2, 1, 2]);
        let c = dominant_communities(&array![[0.0, 0.0], [0.1, 0.9]]);
        assert_eq!((c.community, c.degenerate), (vec![1, 2], vec![0]));
    }

    #[test]
    fn group_approximation_examples() {
        let psi = array![[1.0], [1.0]];
        let (s1, s2) = (array![[2.0]], array![[4.0]]);
        assert_eq!(group_approximation(&psi, &[&s1, &s2]).unwrap(), array![[3.0, 3.0], [3.0, 3.0]]);
        assert_eq!(group_approximation(&psi, &[&s1]).unwrap(), decode(&psi, &s1).unwrap());

        let psi = array![[0.3, 0.7], [1.0, 0.0], [0.5, 0.5]];
        let s = array![[1.0, -2.0], [-2.0, 0.5]];
        let neg = -&s;
        assert!(group_approximation(&psi, &[&s, &neg]).unwrap().iter().all(|&v| v == 0.0));
        assert!(group_approximation(&psi, &[]).is_err());
    }

    #[test]
    fn saliency_examples() {
        let psi = array![[0.2, 0.8], [0.6, 0.4], [1.0, 0.0]];
        let eye = Array2::eye(2);
        let rep = roi_saliency(&[psi], &[&eye], &array![1.0]).unwrap();
        assert!(rep.per_modality[0].scores.iter().all(|&s| (s - 1.0).abs() < 1e-15));
        assert!(rep.per_modality[0].degenerate);

        let rep = roi_saliency(&[Array2::eye(2)], &[&array![[3.0, 0.0], [0.0, 1.0]]], &array![1.0]).unwrap();
        assert_eq!(rep.per_modality[0].scores, vec![3.0, 1.0]);
        assert_eq!(rep.per_modality[0].order, vec![0, 1]);
        assert!(!rep.per_modality[0].degenerate);
    }

    #[test]
    fn fused_saliency_is_convex_combination() {
        // Per-modality scores (4, 0) and (0, 4) under alpha = (0.75, 0.25).
        let s = array![[4.0, 0.0], [0.0, 0.0]];
        let psi1 = array![[1.0, 0.0], [0.0, 1.0]];
        let psi2 = array![[0.0, 1.0], [1.0, 0.0]];
        let rep = roi_saliency(&[psi1, psi2], &[&s], &array![0.75, 0.25]).unwrap();
        assert_eq!(rep.per_modality[0].scores, vec![4.0, 0.0]);
        assert_eq!(rep.per_modality[1].scores, vec![0.0, 4.0]);
        assert_eq!(rep.fused.scores, vec![3.0, 1.0]);
        assert_eq!(rep.fused.top(1), vec![(0, 3.0)]);
    }

    #[test]
    fn identical_groups_have_zero_t() {
        let vals = [0.3, -1.2, 2.5, 0.7];
        let mats: Vec<Array2<f64>> = vals
            .iter()
            .chain(vals.iter().rev())
            .map(|&v| array![[0.0, v, 2.0 * v], [v, 0.0, -v], [2.0 * v, -v, 0.0]])
            .collect();
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        for e in rank_edges(&mats, &labels, 3).unwrap() {
            assert_eq!(e.t, 0.0);
            assert_eq!(e.mean_diff, 0.0);
        }
    }

    #[test]
    fn zero_variance_edge_is_capped() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[0.0, 2.0], [2.0, 0.0]];
        let mats = vec![a.clone(), a, b.clone(), b];
        let e = &rank_edges(&mats, &[0, 0, 1, 1], 1).unwrap()[0];
        assert!(e.degenerate);
        assert_eq!((e.t, e.p_value, e.mean_diff), (T_STAT_CAP, 0.0, 1.0));
    }

    #[test]
    fn welch_matches_hand_computation() {
        // means 2 and 5, variances 1 and 3, n = 3 each: t = -3 / sqrt(4/3)
        let s = welch_t_test(&[1.0, 2.0, 3.0], &[5.0 - 3f64.sqrt(), 5.0, 5.0 + 3f64.sqrt()]).unwrap();
        assert!((s.t - (-3.0 / (4.0f64 / 3.0).sqrt())).abs() < 1e-12);
        assert!(s.p_value > 0.0 && s.p_value < 0.1);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn label_swap_flips_sign_only() {
        let mats: Vec<Array2<f64>> = (0..6)
            .map(|i| {
                let v = (i as f64 * 1.7).sin();
                array![[0.0, v, 1.0 + v * v], [v, 0.0, v.cos()], [1.0 + v * v, v.cos(), 0.0]]
            })
            .collect();
        let a = rank_edges(&mats, &[0, 1, 0, 1, 1, 0], 3).unwrap();
        let b = rank_edges(&mats, &[1, 0, 1, 0, 0, 1], 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.p, x.q), (y.p, y.q));
            assert_eq!(x.t, -y.t);
            assert_eq!(x.mean_diff, -y.mean_diff);
            assert_eq!(x.p_value, y.p_value);
        }
    }
}
