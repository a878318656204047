//! JSON checkpoints. Matrices are stored as nested row-major arrays; floats are
//! written in shortest round-trip form so `load(save(p)) == p` bit for bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelParams, FLATTENING_ORDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub hyper: HyperParams,
    pub modality_names: Vec<String>,
    pub flattening_order: String,
    /// `raw_factors[m][l]` as rows.
    pub raw_factors: Vec<Vec<Vec<Vec<f64>>>>,
    pub interactions: Vec<Vec<Vec<f64>>>,
    pub beta: Vec<f64>,
    pub bias: f64,
    pub alpha_logits: Vec<f64>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ShapeMismatch(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| Error::ShapeMismatch(format!("{what}: {e}")))
}

impl Checkpoint {
    pub fn new(params: &ModelParams, hyper: &HyperParams, modality_names: &[String]) -> Self {
        Self {
            hyper: hyper.clone(),
            modality_names: modality_names.to_vec(),
            flattening_order: FLATTENING_ORDER.to_string(),
            raw_factors: params
                .raw_factors
                .iter()
                .map(|fs| fs.iter().map(rows).collect())
                .collect(),
            interactions: params.interactions.iter().map(rows).collect(),
            beta: params.beta.to_vec(),
            bias: params.bias,
            alpha_logits: params.alpha_logits.to_vec(),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.flattening_order != FLATTENING_ORDER {
            return Err(Error::InvalidArgument(format!(
                "unsupported flattening order {:?}",
                self.flattening_order
            )));
        }
        let raw_factors = self
            .raw_factors
            .iter()
            .enumerate()
            .map(|(m, fs)| {
                fs.iter()
                    .enumerate()
                    .map(|(l, f)| from_rows(f, &format!("factor[{m}][{l}]")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let interactions = self
            .interactions
            .iter()
            .enumerate()
            .map(|(i, s)| from_rows(s, &format!("interaction[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            raw_factors,
            interactions,
            beta: Array1::from(self.beta.clone()),
            bias: self.bias,
            alpha_logits: Array1::from(self.alpha_logits.clone()),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_planted_dataset, PlantedConfig};
    use crate::training::init_params;

    #[test]
    fn round_trip_is_exact() {
        let (data, _) = generate_planted_dataset(&PlantedConfig::new(9, 3, 2, 6, 0.1, 1.0, 4)).unwrap();
        let hyper = HyperParams {
            widths: vec![5, 3],
            ..HyperParams::default()
        };
        let mut params = init_params(&data, &hyper, 11).unwrap();
        params.bias = 0.1 + 0.2;
        params.beta[0] = 1.0 / 3.0;
        params.alpha_logits[1] = -std::f64::consts::PI * 1e-17;
        let ckpt = Checkpoint::new(&params, &hyper, data.modality_names());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params().unwrap(), params);
        assert_eq!(back.flattening_order, "col-major");
    }

    #[test]
    fn matrices_are_row_major() {
        let a = ndarray::array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(rows(&a), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(from_rows(&rows(&a), "a").unwrap(), a);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]], "a").is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt.json"));
    }
}
