//! Classification metrics and the repeated stratified-split protocol.
//!
//! Class 1 is the positive class. Standard deviations are population
//! (divide-by-n) standard deviations.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{stratified_split, MultimodalGraphDataset};
use crate::error::{Error, Result};
use crate::model::{total_loss, HyperParams};
use crate::training::{evaluate_split, train};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

fn check_lengths(labels: &[u8], other: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if labels.len() != other {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} predictions",
            labels.len(),
            other
        )));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{pos} positives and {neg} negatives")));
    }
    Ok((pos, neg))
}

pub fn accuracy(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    check_lengths(labels, predictions.len())?;
    let correct = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mann-Whitney U over `#pos * #neg`, ties counted one half (midranks).
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_lengths(labels, scores.len())?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let midrank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum_pos += midrank * tied_pos as f64;
        start = end;
    }
    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// `(TP / (TP + FN), TN / (TN + FP))`.
pub fn sensitivity_specificity(labels: &[u8], predictions: &[u8]) -> Result<(f64, f64)> {
    check_lengths(labels, predictions.len())?;
    let (pos, neg) = class_counts(labels)?;
    let tp = labels.iter().zip(predictions).filter(|&(&y, &p)| y == 1 && p == 1).count();
    let tn = labels.iter().zip(predictions).filter(|&(&y, &p)| y == 0 && p == 0).count();
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Objective on the training split at the end of training.
    pub final_train_loss: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mean: MetricStats,
    pub std: MetricStats,
    pub runs: Vec<RunResult>,
    pub std_convention: String,
    pub positive_class: u8,
    pub train_fraction: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentSummary {
    pub fn from_runs(runs: Vec<RunResult>, train_fraction: f64) -> Self {
        let (ma, sa) = mean_std(runs.iter().map(|r| r.accuracy));
        let (mu, su) = mean_std(runs.iter().map(|r| r.auc));
        let (mse, sse) = mean_std(runs.iter().map(|r| r.sensitivity));
        let (msp, ssp) = mean_std(runs.iter().map(|r| r.specificity));
        Self {
            mean: MetricStats {
                accuracy: ma,
                auc: mu,
                sensitivity: mse,
                specificity: msp,
            },
            std: MetricStats {
                accuracy: sa,
                auc: su,
                sensitivity: sse,
                specificity: ssp,
            },
            runs,
            std_convention: "population".into(),
            positive_class: 1,
            train_fraction,
        }
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("seed,acc,auc,sens,spec\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.seed, r.accuracy, r.auc, r.sensitivity, r.specificity
            ));
        }
        out
    }

    /// Writes `summary.json` and `runs.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("summary serializes");
        let summary = dir.join("summary.json");
        fs::write(&summary, json).map_err(|e| Error::io(&summary, e))?;
        let runs = dir.join("runs.csv");
        fs::write(&runs, self.runs_csv()).map_err(|e| Error::io(&runs, e))
    }
}

/// One split/train/evaluate cycle; `seed` drives both the split and the initialization.
pub fn run_single(
    dataset: &MultimodalGraphDataset,
    hyper: &HyperParams,
    seed: u64,
    train_fraction: f64,
) -> Result<RunResult> {
    let split = stratified_split(dataset, train_fraction, seed)?;
    let hyper = HyperParams {
        seed,
        ..hyper.clone()
    };
    let (params, _) = train(dataset, &split.train_ids, &hyper)?;
    let eval = evaluate_split(&params, dataset, &split.test_ids, &hyper, 0.5)?;
    let labels: Vec<u8> = split.test_ids.iter().map(|&i| dataset.label(i)).collect();
    let (sensitivity, specificity) = sensitivity_specificity(&labels, &eval.predictions)?;
    Ok(RunResult {
        seed,
        accuracy: accuracy(&labels, &eval.predictions)?,
        auc: auc(&labels, &eval.probabilities)?,
        sensitivity,
        specificity,
        n_train: split.train_ids.len(),
        n_test: split.test_ids.len(),
        final_train_loss: total_loss(&params, dataset, &split.train_ids, &hyper)?.total,
        alpha: params.alpha().to_vec(),
    })
}

/// Run `j` uses seed `base_seed + j`. Runs execute concurrently and are
/// reported in run order.
pub fn run_experiment(
    dataset: &MultimodalGraphDataset,
    hyper: &HyperParams,
    n_runs: usize,
    base_seed: u64,
) -> Result<ExperimentSummary> {
    run_experiment_with_fraction(dataset, hyper, n_runs, base_seed, DEFAULT_TRAIN_FRACTION)
}

pub fn run_experiment_with_fraction(
    dataset: &MultimodalGraphDataset,
    hyper: &HyperParams,
    n_runs: usize,
    base_seed: u64,
    train_fraction: f64,
) -> Result<ExperimentSummary> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("at least one run is required".into()));
    }
    let runs = (0..n_runs as u64)
        .into_par_iter()
        .map(|j| run_single(dataset, hyper, base_seed + j, train_fraction))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentSummary::from_runs(runs, train_fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise win/tie count: the definition the rank formula must reproduce.
    fn auc_pairs(labels: &[u8], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1], &[1, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0, 1], &[0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&[0, 1, 0, 1], &[0.4; 4]).unwrap(), 0.5);
        // both positives outrank both negatives
        assert_eq!(auc(&[0, 1, 0, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 1.0);
        assert_eq!(auc_pairs(&[0, 1, 0, 1], &[0.1, 0.4, 0.35, 0.8]), 1.0);
        // 3 wins, 1 loss
        assert_eq!(auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert!(matches!(auc(&[1, 1], &[0.1, 0.2]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn sensitivity_specificity_examples() {
        assert_eq!(sensitivity_specificity(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(sensitivity_specificity(&[1, 0, 1, 0], &[1, 1, 1, 1]).unwrap(), (1.0, 0.0));
        assert_eq!(sensitivity_specificity(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap(), (0.5, 1.0));
        assert!(sensitivity_specificity(&[0, 0], &[0, 1]).is_err());
    }

    #[test]
    fn single_run_summary_has_zero_std() {
        let run = RunResult {
            seed: 0,
            accuracy: 0.8,
            auc: 0.9,
            sensitivity: 0.7,
            specificity: 0.6,
            n_train: 8,
            n_test: 2,
            final_train_loss: 1.0,
            alpha: vec![1.0],
        };
        let s = ExperimentSummary::from_runs(vec![run], 0.8);
        assert_eq!(s.std, MetricStats::default());
        assert_eq!(s.mean.auc, 0.9);
        assert!(s.runs_csv().starts_with("seed,acc,auc,sens,spec\n0,0.8,0.9,0.7,0.6\n"));
    }

    fn labelled_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        (2usize..20)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(0u8..2, n),
                    proptest::collection::vec(prop_oneof![Just(0.25), Just(0.5), 0.0f64..1.0], n),
                )
            })
            .prop_filter("both classes", |(y, _)| y.contains(&0) && y.contains(&1))
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_count((labels, scores) in labelled_scores()) {
            prop_assert_eq!(auc(&labels, &scores).unwrap(), auc_pairs(&labels, &scores));
        }

        #[test]
        fn auc_is_rank_invariant((labels, scores) in labelled_scores()) {
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&labels, &scores).unwrap(), auc(&labels, &transformed).unwrap());
        }

        #[test]
        fn accuracy_decomposes((labels, scores) in labelled_scores()) {
            let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
            let (sens, spec) = sensitivity_specificity(&labels, &preds).unwrap();
            let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
            let neg = labels.len() as f64 - pos;
            let acc = accuracy(&labels, &preds).unwrap();
            prop_assert!((acc - (sens * pos + spec * neg) / labels.len() as f64).abs() < 1e-12);
        }
    }
}
