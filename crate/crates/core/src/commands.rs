//! Subcommand implementations behind the `sd3mf` binary. Every command writes
//! into `config.out`, including a `config.json` echo of the resolved settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::dataio::{load_dataset, write_matrix_csv, MultimodalGraphDataset};
use crate::error::{Error, Result};
use crate::gradients::{finite_difference_check, random_instance};
use crate::interpret::{discriminative_edges, dominant_communities, group_approximation, roi_saliency, Ranking};
use crate::metrics::{run_experiment_with_fraction, ExperimentSummary};
use crate::model::{parameter_count, total_loss, HyperParams};
use crate::synthgen::{generate_planted_dataset, PlantedConfig};
use crate::training::{init_params, train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset manifest.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Model and optimizer settings; `hyper.seed` is also the base seed of
    /// experiments and the generator seed.
    #[serde(flatten)]
    pub hyper: HyperParams,
    pub n_runs: usize,
    pub train_fraction: f64,
    /// Restrict to one modality by name.
    pub modality: Option<String>,
    /// When nonempty, `experiment` runs once per listed mu.
    pub mu_sweep: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub top_k: usize,
    /// Label of the group used for saliency.
    pub target_group: u8,
    pub threshold: f64,
    pub n: usize,
    pub r: usize,
    pub modalities: usize,
    pub subjects: usize,
    pub noise_sigma: f64,
    pub label_signal: f64,
    pub interaction_noise: f64,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            hyper: HyperParams::default(),
            n_runs: 10,
            train_fraction: 0.8,
            modality: None,
            mu_sweep: Vec::new(),
            checkpoint: None,
            top_k: 20,
            target_group: 1,
            threshold: 0.5,
            n: 30,
            r: 5,
            modalities: 2,
            subjects: 40,
            noise_sigma: 0.1,
            label_signal: 1.0,
            interaction_noise: 0.1,
            h: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn load_dataset(&self) -> Result<MultimodalGraphDataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("a dataset manifest is required (--dataset)".into()))?;
        let data = load_dataset(path)?;
        match &self.modality {
            Some(name) => data.select_modalities(&[name]),
            None => Ok(data),
        }
    }

    pub fn planted_config(&self) -> PlantedConfig {
        let mut cfg = PlantedConfig::new(
            self.n,
            self.r,
            self.modalities,
            self.subjects,
            self.noise_sigma,
            self.label_signal,
            self.hyper.seed,
        );
        cfg.interaction_noise = self.interaction_noise;
        cfg
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Planted dataset, manifest and `ground_truth.json`.
pub fn cmd_generate(config: &RunConfig) -> Result<Value> {
    let planted = config.planted_config();
    let (data, truth) = generate_planted_dataset(&planted)?;
    config.echo()?;
    let manifest = data.save(&config.out)?;
    truth.write_json(&planted, &config.out.join("ground_truth.json"))?;
    Ok(json!({
        "manifest": manifest,
        "subjects": data.n_subjects(),
        "modalities": data.modality_names(),
        "n": data.n(),
    }))
}

/// Trains on every subject; writes `checkpoint.json` and `history.csv`.
pub fn cmd_train(config: &RunConfig) -> Result<Value> {
    let data = config.load_dataset()?;
    config.hyper.validate()?;
    config.echo()?;
    let ids: Vec<usize> = (0..data.n_subjects()).collect();
    let (params, history) = train(&data, &ids, &config.hyper)?;
    Checkpoint::new(&params, &config.hyper, data.modality_names()).save(&config.out.join("checkpoint.json"))?;
    history.write_csv(&config.out.join("history.csv"))?;
    let loss = total_loss(&params, &data, &ids, &config.hyper)?;
    Ok(json!({
        "total_loss": loss.total,
        "recon_loss": loss.recon,
        "cls_loss": loss.cls,
        "train_accuracy": history.train_accuracy.last(),
        "alpha": params.alpha().to_vec(),
    }))
}

fn sweep_label(mu: f64) -> String {
    format!("mu_{mu}")
}

/// Repeated split/train/evaluate. With a mu sweep each value gets its own
/// subdirectory and `sweep.csv` collects the means.
pub fn cmd_experiment(config: &RunConfig) -> Result<Value> {
    let data = config.load_dataset()?;
    config.hyper.validate()?;
    config.echo()?;
    let run = |hyper: &HyperParams| -> Result<ExperimentSummary> {
        run_experiment_with_fraction(&data, hyper, config.n_runs, config.hyper.seed, config.train_fraction)
    };
    if config.mu_sweep.is_empty() {
        let summary = run(&config.hyper)?;
        summary.write(&config.out)?;
        return Ok(json!({ "mean": summary.mean, "std": summary.std }));
    }
    let mut csv = String::from("mu,mean_acc,std_acc,mean_auc,std_auc\n");
    let mut out = Vec::new();
    for &mu in &config.mu_sweep {
        let hyper = HyperParams {
            mu,
            ..config.hyper.clone()
        };
        hyper.validate()?;
        let summary = run(&hyper)?;
        summary.write(&config.out.join(sweep_label(mu)))?;
        csv.push_str(&format!(
            "{mu},{},{},{},{}\n",
            summary.mean.accuracy, summary.std.accuracy, summary.mean.auc, summary.std.auc
        ));
        out.push(json!({ "mu": mu, "mean": summary.mean, "std": summary.std }));
    }
    write_text(&config.out.join("sweep.csv"), &csv)?;
    Ok(Value::Array(out))
}

/// Finite-difference check on the dataset (initialized from `hyper`) or, without
/// one, on a random dense instance with n = 8, widths (4, 3, 2), two modalities
/// and six subjects.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<Value> {
    let (data, params, hyper) = match &config.dataset {
        Some(_) => {
            let data = config.load_dataset()?;
            let params = init_params(&data, &config.hyper, config.hyper.seed)?;
            (data, params, config.hyper.clone())
        }
        None => {
            let widths = vec![4, 3, 2];
            let (data, params) = random_instance(config.hyper.seed, 8, &widths, 2, 6);
            (data, params, HyperParams { widths, ..config.hyper.clone() })
        }
    };
    let ids: Vec<usize> = (0..data.n_subjects()).collect();
    let report = finite_difference_check(&params, &data, &ids, &hyper, config.h, config.tolerance)?;
    config.echo()?;
    let value = serde_json::to_value(&report).expect("report serializes");
    write_text(
        &config.out.join("gradcheck.json"),
        &serde_json::to_string_pretty(&value).expect("report serializes"),
    )?;
    Ok(value)
}

fn ranking_csv(ranking: &Ranking, k: usize) -> String {
    let mut out = String::from("rank,node,score\n");
    for (rank, (node, score)) in ranking.top(k).into_iter().enumerate() {
        out.push_str(&format!("{},{node},{score}\n", rank + 1));
    }
    out
}

/// Community, saliency, group-approximation, edge and membership exports for a
/// trained checkpoint.
pub fn cmd_interpret(config: &RunConfig) -> Result<Value> {
    let ckpt_path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("a checkpoint is required (--checkpoint)".into()))?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = config.load_dataset()?.select_modalities(&ckpt.modality_names)?;
    let params = ckpt.params()?;
    params.check_against(&data)?;
    let hyper = &ckpt.hyper;
    config.echo()?;

    let psis: Vec<_> = params
        .memberships(hyper.row_norm_epsilon)?
        .into_iter()
        .map(|e| e.psi)
        .collect();
    let group = |label: u8| -> Vec<_> {
        (0..data.n_subjects())
            .filter(|&i| data.label(i) == label)
            .map(|i| &params.interactions[i])
            .collect()
    };
    let target = group(config.target_group);
    let saliency = roi_saliency(&psis, &target, &params.alpha())?;
    let n = data.n();
    let edge_k = config.top_k.min(n * (n - 1) / 2);

    let mut degenerate_nodes = serde_json::Map::new();
    for (m, name) in data.modality_names().iter().enumerate() {
        let comm = dominant_communities(&psis[m]);
        let mut csv = String::from("node,community\n");
        for (p, c) in comm.community.iter().enumerate() {
            csv.push_str(&format!("{p},{c}\n"));
        }
        write_text(&config.out.join(format!("communities_{name}.csv")), &csv)?;
        degenerate_nodes.insert(name.clone(), json!(comm.degenerate));

        write_text(
            &config.out.join(format!("saliency_{name}.csv")),
            &ranking_csv(&saliency.per_modality[m], config.top_k),
        )?;
        for label in [0u8, 1] {
            let members = group(label);
            if members.is_empty() {
                continue;
            }
            write_matrix_csv(
                &config.out.join(format!("approx_class{label}_{name}.csv")),
                &group_approximation(&psis[m], &members)?,
            )?;
        }
        let edges = discriminative_edges(&data, &params, hyper, m, edge_k)?;
        let mut csv = String::from("p,q,mean_diff,t,p_value,flag\n");
        for e in &edges {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.p,
                e.q,
                e.mean_diff,
                e.t,
                e.p_value,
                u8::from(e.degenerate)
            ));
        }
        write_text(&config.out.join(format!("edges_{name}.csv")), &csv)?;
        write_matrix_csv(&config.out.join(format!("psi_{name}.csv")), &psis[m])?;
    }
    write_text(
        &config.out.join("saliency_fused.csv"),
        &ranking_csv(&saliency.fused, config.top_k),
    )?;
    Ok(json!({
        "modalities": data.modality_names(),
        "alpha": params.alpha().to_vec(),
        "degenerate_nodes": degenerate_nodes,
        "saliency_degenerate": saliency.fused.degenerate,
        "top_fused": saliency.fused.top(config.top_k.min(5)),
    }))
}

/// Free-parameter count for `n`, `widths`, `modalities` and `subjects`.
pub fn cmd_paramcount(config: &RunConfig) -> Result<Value> {
    config.hyper.validate()?;
    let count = parameter_count(config.n, &config.hyper.widths, config.modalities, config.subjects);
    config.echo()?;
    let value = serde_json::to_value(count).expect("count serializes");
    write_text(
        &config.out.join("paramcount.json"),
        &serde_json::to_string_pretty(&value).expect("count serializes"),
    )?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.hyper.widths, vec![30, 20, 10]);
        assert_eq!(c.hyper.learning_rate, 1e-5);
        assert_eq!(c.hyper.max_iters, 30_000);
        assert_eq!(c.hyper.mu, 1.0);
        assert_eq!((c.n_runs, c.train_fraction, c.top_k), (10, 0.8, 20));
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"mu": 10.0, "n_runs": 3, "widths": [5]}"#).unwrap();
        assert_eq!(c.hyper.mu, 10.0);
        assert_eq!(c.hyper.widths, vec![5]);
        assert_eq!(c.n_runs, 3);
        assert_eq!(c.hyper.learning_rate, 1e-5);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
