//! Initialization and the gradient-descent training loop.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{symmetrize_in_place, MultimodalGraphDataset};
use crate::error::{Error, Result};
use crate::gradients::loss_gradients;
use crate::model::{
    check_subset, effective_bias, fused_features, predict, total_loss, HyperParams, LossParts,
    ModelParams,
};

/// Gain of the Xavier-uniform classifier initialization.
pub const CLASSIFIER_INIT_GAIN: f64 = 1e-3;

/// Training aborts once the objective exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub iterations: Vec<usize>,
    pub recon_loss: Vec<f64>,
    pub cls_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    fn push(&mut self, iteration: usize, loss: &LossParts, accuracy: f64) {
        self.iterations.push(iteration);
        self.recon_loss.push(loss.recon);
        self.cls_loss.push(loss.cls);
        self.train_accuracy.push(accuracy);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,recon_loss,cls_loss,train_acc\n");
        for k in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.iterations[k], self.recon_loss[k], self.cls_loss[k], self.train_accuracy[k]
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `scale * Q` with `Q` the sign-corrected QR factor of a Gaussian matrix:
/// orthonormal columns when `rows >= cols`, orthonormal rows otherwise.
pub fn orthogonal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    let q = qr.q();
    let r = qr.r();
    let q = Array2::from_shape_fn((tall, short), |(i, j)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        scale * sign * q[(i, j)]
    });
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().into_owned()
    }
}

/// `S_i = (1/M) sum_m Psi_m^T A_i^m Psi_m`, symmetrized, for every subject.
pub fn init_interactions(dataset: &MultimodalGraphDataset, psis: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let m_count = psis.len() as f64;
    (0..dataset.n_subjects())
        .map(|i| {
            let r = psis[0].ncols();
            let mut s = Array2::<f64>::zeros((r, r));
            for (psi, a) in psis.iter().zip(dataset.views(i)) {
                s += &psi.t().dot(a).dot(psi);
            }
            s /= m_count;
            symmetrize_in_place(&mut s);
            s
        })
        .collect()
}

pub fn init_params(dataset: &MultimodalGraphDataset, hyper: &HyperParams, seed: u64) -> Result<ModelParams> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_factors: Vec<Vec<Array2<f64>>> = (0..dataset.n_modalities())
        .map(|_| {
            let mut prev = dataset.n();
            hyper
                .widths
                .iter()
                .map(|&w| {
                    let f = orthogonal_matrix(&mut rng, prev, w, hyper.init_scale);
                    prev = w;
                    f
                })
                .collect()
        })
        .collect();
    let r = hyper.communities();
    let psis = raw_factors
        .iter()
        .map(|f| crate::model::effective_membership(f, hyper.row_norm_epsilon).map(|e| e.psi))
        .collect::<Result<Vec<_>>>()?;
    let interactions = init_interactions(dataset, &psis);
    let bound = CLASSIFIER_INIT_GAIN * (6.0 / (r * r + 1) as f64).sqrt();
    let beta = Array1::from_shape_fn(r * r, |_| rng.random_range(-bound..=bound));
    Ok(ModelParams {
        raw_factors,
        interactions,
        beta,
        bias: 0.0,
        alpha_logits: Array1::zeros(dataset.n_modalities()),
    })
}

/// Initializes with `hyper.seed` and runs [`train_from`].
pub fn train(
    dataset: &MultimodalGraphDataset,
    train_ids: &[usize],
    hyper: &HyperParams,
) -> Result<(ModelParams, TrainingHistory)> {
    let params = init_params(dataset, hyper, hyper.seed)?;
    train_from(params, dataset, train_ids, hyper)
}

/// Gradient descent `theta <- theta - lr * grad`, then `S_i <- (S_i + S_i^T) / 2`.
/// History is sampled at every multiple of `log_interval`, iteration 0 included,
/// on the full training set.
pub fn train_from(
    mut params: ModelParams,
    dataset: &MultimodalGraphDataset,
    train_ids: &[usize],
    hyper: &HyperParams,
) -> Result<(ModelParams, TrainingHistory)> {
    hyper.validate()?;
    check_subset(dataset, train_ids)?;
    params.check_against(dataset)?;
    if hyper.supervision_on {
        let positives = train_ids.iter().filter(|&&i| dataset.label(i) == 1).count();
        if positives == 0 || positives == train_ids.len() {
            return Err(Error::SingleClass(
                "supervised training needs both classes in the training set".into(),
            ));
        }
    }

    let mut batches = BatchSampler::new(train_ids, hyper.batch_size, hyper.seed);
    let mut history = TrainingHistory::default();
    let lr = hyper.learning_rate;
    for t in 0..=hyper.max_iters {
        let logging = t % hyper.log_interval == 0;
        if t == hyper.max_iters {
            if logging {
                let loss = total_loss(&params, dataset, train_ids, hyper)?;
                guard(t, &loss)?;
                history.push(t, &loss, training_accuracy(&params, dataset, train_ids, hyper)?);
            }
            break;
        }
        let batch = batches.next_batch();
        let (loss, grads) = loss_gradients(&params, dataset, batch, hyper)?;
        guard(t, &loss)?;
        if logging {
            let full = if batch.len() == train_ids.len() {
                loss
            } else {
                total_loss(&params, dataset, train_ids, hyper)?
            };
            history.push(t, &full, training_accuracy(&params, dataset, train_ids, hyper)?);
        }
        for (w, g) in params
            .raw_factors
            .iter_mut()
            .flatten()
            .zip(grads.raw_factors.iter().flatten())
        {
            w.scaled_add(-lr, g);
        }
        for &i in batch {
            params.interactions[i].scaled_add(-lr, &grads.interactions[i]);
            symmetrize_in_place(&mut params.interactions[i]);
        }
        params.beta.scaled_add(-lr, &grads.beta);
        if hyper.use_bias {
            params.bias -= lr * grads.bias;
        }
        params.alpha_logits.scaled_add(-lr, &grads.alpha_logits);
    }
    if !params.all_finite() {
        return Err(Error::NumericalFailure {
            iteration: hyper.max_iters,
            loss: f64::NAN,
        });
    }
    Ok((params, history))
}

fn guard(iteration: usize, loss: &LossParts) -> Result<()> {
    if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
        return Err(Error::NumericalFailure {
            iteration,
            loss: loss.total,
        });
    }
    Ok(())
}

struct BatchSampler {
    ids: Vec<usize>,
    batch_size: Option<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(ids: &[usize], batch_size: Option<usize>, seed: u64) -> Self {
        Self {
            ids: ids.to_vec(),
            batch_size: batch_size.filter(|&b| b < ids.len()),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        let Some(b) = self.batch_size else {
            return &self.ids;
        };
        if self.cursor == 0 || self.cursor + b > self.ids.len() {
            self.ids.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += b;
        &self.ids[start..start + b]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub subjects: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub predictions: Vec<u8>,
}

/// Probability per subject and the hard label `probability >= threshold`.
pub fn evaluate_split(
    params: &ModelParams,
    dataset: &MultimodalGraphDataset,
    ids: &[usize],
    hyper: &HyperParams,
    threshold: f64,
) -> Result<Evaluation> {
    check_subset(dataset, ids)?;
    params.check_against(dataset)?;
    let psis: Vec<Array2<f64>> = params
        .memberships(hyper.row_norm_epsilon)?
        .into_iter()
        .map(|e| e.psi)
        .collect();
    let bias = effective_bias(params, hyper);
    let probabilities = ids
        .iter()
        .map(|&i| {
            let v = fused_features(&psis, dataset, i, &params.alpha_logits)?;
            predict(&v, &params.beta, bias)
        })
        .collect::<Result<Vec<f64>>>()?;
    let predictions = probabilities.iter().map(|&p| u8::from(p >= threshold)).collect();
    Ok(Evaluation {
        subjects: ids.to_vec(),
        probabilities,
        predictions,
    })
}

fn training_accuracy(
    params: &ModelParams,
    dataset: &MultimodalGraphDataset,
    ids: &[usize],
    hyper: &HyperParams,
) -> Result<f64> {
    let eval = evaluate_split(params, dataset, ids, hyper, 0.5)?;
    let correct = eval
        .predictions
        .iter()
        .zip(ids)
        .filter(|(&p, &i)| p == dataset.label(i))
        .count();
    Ok(correct as f64 / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_planted_dataset, PlantedConfig};

    fn small_hyper() -> HyperParams {
        HyperParams {
            widths: vec![6, 3],
            learning_rate: 1e-4,
            max_iters: 50,
            log_interval: 10,
            seed: 5,
            ..HyperParams::default()
        }
    }

    fn small_dataset() -> MultimodalGraphDataset {
        generate_planted_dataset(&PlantedConfig::new(10, 3, 2, 8, 0.1, 1.0, 1)).unwrap().0
    }

    #[test]
    fn orthogonal_columns_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (rows, cols) in [(9, 4), (4, 9), (5, 5)] {
            let q = orthogonal_matrix(&mut rng, rows, cols, 1e-3);
            let gram = if rows >= cols { q.t().dot(&q) } else { q.dot(&q.t()) };
            for ((i, j), v) in gram.indexed_iter() {
                let target = if i == j { 1e-6 } else { 0.0 };
                assert!((v - target).abs() <= 1e-10, "{rows}x{cols} gram[{i},{j}] = {v}");
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_uniform_fusion() {
        let d = small_dataset();
        let h = small_hyper();
        let a = init_params(&d, &h, 3).unwrap();
        assert_eq!(a, init_params(&d, &h, 3).unwrap());
        assert_ne!(a, init_params(&d, &h, 4).unwrap());
        assert_eq!(a.alpha().to_vec(), vec![0.5, 0.5]);
        assert_eq!(a.bias, 0.0);
        let bound = CLASSIFIER_INIT_GAIN * (6.0f64 / 10.0).sqrt();
        assert!(a.beta.iter().all(|b| b.abs() <= bound));
        for s in &a.interactions {
            assert_eq!(s, &s.t());
        }
    }

    #[test]
    fn identity_memberships_copy_adjacency() {
        let d = small_dataset().select_modalities(&["m0"]).unwrap();
        let s = init_interactions(&d, &[Array2::eye(d.n())]);
        for (i, si) in s.iter().enumerate() {
            assert_eq!(si, d.matrix(i, 0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let d = small_dataset();
        let h = HyperParams {
            learning_rate: 0.0,
            ..small_hyper()
        };
        let ids: Vec<usize> = (0..d.n_subjects()).collect();
        let (p, _) = train(&d, &ids, &h).unwrap();
        assert_eq!(p, init_params(&d, &h, h.seed).unwrap());
    }

    #[test]
    fn history_has_expected_length() {
        let d = small_dataset();
        let ids: Vec<usize> = (0..d.n_subjects()).collect();
        for (iters, interval) in [(50, 10), (47, 10), (5, 1)] {
            let h = HyperParams {
                max_iters: iters,
                log_interval: interval,
                ..small_hyper()
            };
            let (_, hist) = train(&d, &ids, &h).unwrap();
            assert_eq!(hist.len(), iters / interval + 1);
            assert_eq!(hist.iterations[0], 0);
        }
    }

    #[test]
    fn unsupervised_history_reports_zero_classification_loss() {
        let d = small_dataset();
        let ids: Vec<usize> = (0..d.n_subjects()).collect();
        let h = HyperParams {
            supervision_on: false,
            ..small_hyper()
        };
        let (_, hist) = train(&d, &ids, &h).unwrap();
        assert!(hist.cls_loss.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let d = small_dataset();
        let zeros: Vec<usize> = (0..d.n_subjects()).filter(|&i| d.label(i) == 0).collect();
        assert!(matches!(train(&d, &zeros, &small_hyper()), Err(Error::SingleClass(_))));
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let d = small_dataset();
        let ids: Vec<usize> = (0..d.n_subjects()).collect();
        let h = HyperParams {
            learning_rate: 1e6,
            ..small_hyper()
        };
        match train(&d, &ids, &h) {
            Err(Error::NumericalFailure { iteration, .. }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn minibatch_training_is_deterministic() {
        let d = small_dataset();
        let ids: Vec<usize> = (0..d.n_subjects()).collect();
        let h = HyperParams {
            batch_size: Some(3),
            ..small_hyper()
        };
        let (a, ha) = train(&d, &ids, &h).unwrap();
        let (b, hb) = train(&d, &ids, &h).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn evaluation_threshold_conventions() {
        let d = small_dataset();
        let h = small_hyper();
        let mut p = init_params(&d, &h, 0).unwrap();
        p.beta.fill(0.0);
        let ids: Vec<usize> = (0..d.n_subjects()).collect();
        let e = evaluate_split(&p, &d, &ids, &h, 0.5).unwrap();
        assert!(e.probabilities.iter().all(|&q| q == 0.5));
        assert!(e.predictions.iter().all(|&y| y == 1));

        let p = init_params(&d, &h, 0).unwrap();
        assert!(evaluate_split(&p, &d, &ids, &h, 0.0).unwrap().predictions.iter().all(|&y| y == 1));
        let above = 1.0 + f64::EPSILON;
        assert!(evaluate_split(&p, &d, &ids, &h, above).unwrap().predictions.iter().all(|&y| y == 0));
    }
}
