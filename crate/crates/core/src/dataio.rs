//! Graph-population data model, manifest format and stratified splitting.
//!
//! A manifest is a JSON file
//!
//! ```json
//! { "n": 90, "modalities": ["fmri", "dti"],
//!   "subjects": [ { "id": "s000", "label": 1,
//!                   "matrices": { "fmri": "s000_fmri.csv", "dti": "s000_dti.csv" } } ] }
//! ```
//!
//! Matrix paths are relative to the manifest's directory. Each CSV holds `n`
//! rows of `n` comma-separated decimals and no header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs whose `max |A - A^T|` exceeds this are rejected as directed.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalGraphDataset {
    n: usize,
    modality_names: Vec<String>,
    subject_ids: Vec<String>,
    /// `adjacency[i][m]` is subject `i` in modality `m`.
    adjacency: Vec<Vec<Array2<f64>>>,
    labels: Vec<u8>,
}

impl MultimodalGraphDataset {
    /// Validates and symmetrizes the matrices. Diagonals are kept as given.
    pub fn new(
        modality_names: Vec<String>,
        subject_ids: Vec<String>,
        adjacency: Vec<Vec<Array2<f64>>>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if modality_names.is_empty() {
            return Err(Error::InvalidArgument("at least one modality is required".into()));
        }
        if adjacency.is_empty() {
            return Err(Error::InvalidArgument("at least one subject is required".into()));
        }
        if subject_ids.len() != adjacency.len() || labels.len() != adjacency.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} subject ids, {} labels, {} matrix sets",
                subject_ids.len(),
                labels.len(),
                adjacency.len()
            )));
        }
        let n = adjacency[0].first().map(|a| a.nrows()).unwrap_or(0);
        if n == 0 {
            return Err(Error::DimensionMismatch("empty adjacency matrix".into()));
        }
        let mut adjacency = adjacency;
        for (i, views) in adjacency.iter_mut().enumerate() {
            let sid = &subject_ids[i];
            if labels[i] > 1 {
                return Err(Error::InvalidLabel {
                    subject: sid.clone(),
                    label: i64::from(labels[i]),
                });
            }
            if views.len() != modality_names.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {sid} has {} modalities, expected {}",
                    views.len(),
                    modality_names.len()
                )));
            }
            for (m, a) in views.iter_mut().enumerate() {
                let mname = &modality_names[m];
                if a.nrows() != n || a.ncols() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "subject {sid}, modality {mname}: {}x{} matrix, expected {n}x{n}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
                if let Some(((row, col), _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        subject: sid.clone(),
                        modality: mname.clone(),
                        row,
                        col,
                    });
                }
                let max_diff = max_asymmetry(a);
                if max_diff > SYMMETRY_TOLERANCE {
                    return Err(Error::Asymmetric {
                        subject: sid.clone(),
                        modality: mname.clone(),
                        max_diff,
                    });
                }
                symmetrize_in_place(a);
            }
        }
        Ok(Self {
            n,
            modality_names,
            subject_ids,
            adjacency,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.adjacency.len()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, subject: usize) -> u8 {
        self.labels[subject]
    }

    pub fn matrix(&self, subject: usize, modality: usize) -> &Array2<f64> {
        &self.adjacency[subject][modality]
    }

    pub fn views(&self, subject: usize) -> &[Array2<f64>] {
        &self.adjacency[subject]
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modality_names.iter().position(|m| m == name)
    }

    /// Restricts the dataset to the named modalities, in the given order.
    pub fn select_modalities<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|name| {
                self.modality_index(name.as_ref()).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown modality {:?}", name.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("no modalities selected".into()));
        }
        Ok(Self {
            n: self.n,
            modality_names: idx.iter().map(|&m| self.modality_names[m].clone()).collect(),
            subject_ids: self.subject_ids.clone(),
            adjacency: self
                .adjacency
                .iter()
                .map(|views| idx.iter().map(|&m| views[m].clone()).collect())
                .collect(),
            labels: self.labels.clone(),
        })
    }

    /// Writes the manifest and one CSV per subject and modality into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut subjects = Vec::with_capacity(self.n_subjects());
        for (i, sid) in self.subject_ids.iter().enumerate() {
            let mut matrices = BTreeMap::new();
            for (m, mname) in self.modality_names.iter().enumerate() {
                let file = format!("{sid}_{mname}.csv");
                write_matrix_csv(&dir.join(&file), &self.adjacency[i][m])?;
                matrices.insert(mname.clone(), file);
            }
            subjects.push(ManifestSubject {
                id: sid.clone(),
                label: i64::from(self.labels[i]),
                matrices,
            });
        }
        let manifest = Manifest {
            n: self.n,
            modalities: self.modality_names.clone(),
            subjects,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// `A <- (A + A^T) / 2`, exact: both triangles receive the same rounded value.
pub fn symmetrize_in_place(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[[i, j]] + a[[j, i]]) / 2.0;
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    modalities: Vec<String>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    label: i64,
    matrices: BTreeMap<String, String>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<MultimodalGraphDataset> {
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut ids = Vec::with_capacity(manifest.subjects.len());
    let mut labels = Vec::with_capacity(manifest.subjects.len());
    let mut adjacency = Vec::with_capacity(manifest.subjects.len());
    for subject in &manifest.subjects {
        let label = match subject.label {
            0 => 0u8,
            1 => 1u8,
            other => {
                return Err(Error::InvalidLabel {
                    subject: subject.id.clone(),
                    label: other,
                })
            }
        };
        let mut views = Vec::with_capacity(manifest.modalities.len());
        for mname in &manifest.modalities {
            let rel = subject.matrices.get(mname).ok_or_else(|| Error::Malformed {
                path: manifest_path.to_path_buf(),
                message: format!("subject {} has no matrix for modality {mname}", subject.id),
            })?;
            let a = read_matrix_csv(&base.join(rel))?;
            if a.nrows() != manifest.n || a.ncols() != manifest.n {
                return Err(Error::DimensionMismatch(format!(
                    "subject {}, modality {mname}: {}x{} matrix, manifest declares n = {}",
                    subject.id,
                    a.nrows(),
                    a.ncols(),
                    manifest.n
                )));
            }
            views.push(a);
        }
        ids.push(subject.id.clone());
        labels.push(label);
        adjacency.push(views);
    }
    MultimodalGraphDataset::new(manifest.modalities, ids, adjacency, labels)
}

/// Reads a headerless CSV of decimals. Ragged rows are a dimension mismatch.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<f64>().map_err(|_| Error::Malformed {
                    path: path.to_path_buf(),
                    message: format!("row {r}, column {c}: cannot parse {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if let Some(bad) = rows.iter().position(|row| row.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "{}: row {bad} has {} values, row 0 has {ncols}",
            path.display(),
            rows[bad].len()
        )));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((nrows, ncols), flat).expect("rectangular rows"))
}

/// Writes values with shortest round-trip formatting, so reading back is exact.
pub fn write_matrix_csv(path: &Path, a: &Array2<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    for row in a.rows() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Per-class shuffled split. Each class keeps `round(fraction * count)` subjects
/// for training, clamped so that both sides get at least one subject of each class.
pub fn stratified_split(
    dataset: &MultimodalGraphDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitIndices> {
    split_labels(dataset.labels(), train_fraction, seed)
}

pub(crate) fn split_labels(labels: &[u8], train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} yields an empty split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            return Err(Error::SingleClass(format!(
                "class {class} has {} subject(s); stratified splitting needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let count = members.len();
        let n_train = ((train_fraction * count as f64).round() as usize).clamp(1, count - 1);
        train_ids.extend_from_slice(&members[..n_train]);
        test_ids.extend_from_slice(&members[n_train..]);
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitIndices {
        train_ids,
        test_ids,
    })
}
