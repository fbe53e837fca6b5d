//! Dataset schema, preprocessing to fixed-size windows, user-grouped fold
//! splitting, batching, and a synthetic generator for desk-scale runs.
//!
//! On disk a dataset is a directory: `dataset.json` header, `instances.jsonl`
//! with one record per line, and `blobs/` holding one f32 tensor blob per
//! sensor window. Loading preprocesses every record, so the directory may
//! hold raw variable-length windows; in memory every instance is already
//! fixed-size (acc/gyro 800x3, mfcc 420x13).

mod batch;
mod folds;
mod preprocess;
mod store;
mod synth;

pub use batch::Batcher;
pub use folds::{split_folds, FoldPlan, FoldSplit};
pub use preprocess::{preprocess, Prepared, RawInstance};
pub use store::{load_dataset, read_header, read_records, save_dataset, Discarded};
pub use synth::{matched_filter, synth_dataset, synth_generate, SynthSpec};

use crate::model::{Batch, Modality};
use crate::objective::{LabelMatrix, ObjectiveError};
use crate::tensor::{Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows per IMU window: 20 s at 40 Hz.
pub const IMU_LEN: usize = 800;
/// IMU channels (x, y, z).
pub const IMU_CH: usize = 3;
/// MFCC frames per window after tiling.
pub const MFCC_LEN: usize = 420;
/// MFCC coefficients per frame.
pub const MFCC_CH: usize = 13;
/// Windows with fewer MFCC frames than this are discarded.
pub const MFCC_MIN_FRAMES: usize = 20;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("instance {id}: {what}")]
    Malformed { id: String, what: String },
    #[error("dataset: {0}")]
    Format(String),
    #[error("{n} users cannot fill {k} folds")]
    TooFewUsers { n: usize, k: usize },
    #[error("empty instance pool")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// `dataset.json` — the directory header. `label_names` has exactly
/// `n_labels` entries and `ps_width` is the declared phone-state vector
/// width shared by every instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub n_labels: usize,
    pub ps_width: usize,
    pub label_names: Vec<String>,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(DataError::Format(format!(
                "format_version {} unsupported (expected {DATASET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.n_labels == 0 {
            return Err(DataError::Format("n_labels must be positive".into()));
        }
        if self.ps_width == 0 {
            return Err(DataError::Format("ps_width must be positive".into()));
        }
        if self.label_names.len() != self.n_labels {
            return Err(DataError::Format(format!(
                "{} label names for n_labels={}",
                self.label_names.len(),
                self.n_labels
            )));
        }
        Ok(())
    }
}

/// One line of `instances.jsonl`. `labels` entries are 0, 1, or null; null
/// is the only on-disk representation of a missing label. `files` paths are
/// relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: String,
    pub user: String,
    pub labels: Vec<Option<u8>>,
    pub files: FileRefs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRefs {
    pub acc: String,
    pub gyro: String,
    pub mfcc: String,
    pub ps: String,
}

/// A preprocessed instance: fixed-size windows, binary ps vector, and one
/// 0/1/missing slot per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub user: String,
    pub acc: Tensor<f32>,
    pub gyro: Tensor<f32>,
    pub mfcc: Tensor<f32>,
    pub ps: Tensor<f32>,
    pub labels: Vec<Option<u8>>,
}

impl Instance {
    /// Checks the post-preprocessing invariants against a header.
    pub fn validate(&self, header: &DatasetHeader) -> Result<(), DataError> {
        let bad = |what: String| DataError::Malformed {
            id: self.id.clone(),
            what,
        };
        for (name, t) in [("acc", &self.acc), ("gyro", &self.gyro)] {
            if t.shape() != [IMU_LEN, IMU_CH] {
                return Err(bad(format!(
                    "{name} shape {:?}, expected [{IMU_LEN}, {IMU_CH}]",
                    t.shape()
                )));
            }
        }
        if self.mfcc.shape() != [MFCC_LEN, MFCC_CH] {
            return Err(bad(format!(
                "mfcc shape {:?}, expected [{MFCC_LEN}, {MFCC_CH}]",
                self.mfcc.shape()
            )));
        }
        if self.ps.shape() != [header.ps_width] {
            return Err(bad(format!(
                "ps shape {:?}, expected [{}]",
                self.ps.shape(),
                header.ps_width
            )));
        }
        if self.ps.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(bad("ps entries must be 0 or 1".into()));
        }
        if self.labels.len() != header.n_labels {
            return Err(bad(format!(
                "{} labels, expected {}",
                self.labels.len(),
                header.n_labels
            )));
        }
        if let Some(v) = self.labels.iter().flatten().find(|&&v| v > 1) {
            return Err(bad(format!("label value {v}, expected 0/1/missing")));
        }
        Ok(())
    }
}

/// An in-memory dataset: header plus preprocessed instances. Sensor data is
/// held at f32 (the on-disk precision) and cast to the model scalar when a
/// batch is materialized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(header: DatasetHeader) -> Result<Self, DataError> {
        header.validate()?;
        Ok(Dataset {
            header,
            instances: Vec::new(),
        })
    }

    pub fn push(&mut self, inst: Instance) -> Result<(), DataError> {
        inst.validate(&self.header)?;
        self.instances.push(inst);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Distinct user ids, sorted.
    pub fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = self.instances.iter().map(|i| i.user.clone()).collect();
        u.sort();
        u.dedup();
        u
    }

    /// Indices of instances belonging to any of `users`, in dataset order.
    pub fn indices_for_users(&self, users: &[String]) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| users.iter().any(|u| *u == inst.user))
            .map(|(i, _)| i)
            .collect()
    }

    /// Label matrix over the given instances, one row per index.
    pub fn label_matrix(&self, indices: &[usize]) -> Result<LabelMatrix, DataError> {
        let rows: Vec<Vec<Option<u8>>> = indices
            .iter()
            .map(|&i| self.instances[i].labels.clone())
            .collect();
        Ok(LabelMatrix::from_rows(&rows)?)
    }

    /// Materializes instances into a model batch carrying `modalities`,
    /// aligned with a label matrix row-for-row.
    pub fn make_batch<T: Scalar>(
        &self,
        indices: &[usize],
        modalities: &[Modality],
    ) -> Result<(Batch<T>, LabelMatrix), DataError> {
        if indices.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.instances.len()) {
            return Err(DataError::Format(format!(
                "instance index {bad} out of range ({} instances)",
                self.instances.len()
            )));
        }
        let mut batch = Batch::new();
        for &m in modalities {
            let v = batch.modality_mut(m);
            for &i in indices {
                let inst = &self.instances[i];
                let t = match m {
                    Modality::Acc => &inst.acc,
                    Modality::Gyro => &inst.gyro,
                    Modality::Aud => &inst.mfcc,
                    Modality::Ps => &inst.ps,
                };
                v.push(t.cast::<T>());
            }
        }
        let labels = self.label_matrix(indices)?;
        Ok((batch, labels))
    }
}

/// Per-label (present, positive) counts over label rows — the realized
/// class balance of a dataset.
pub fn label_stats<'a, I>(rows: I, n_labels: usize) -> Result<Vec<(usize, usize)>, DataError>
where
    I: IntoIterator<Item = &'a Vec<Option<u8>>>,
{
    let mut stats = vec![(0usize, 0usize); n_labels];
    for row in rows {
        if row.len() != n_labels {
            return Err(DataError::Format(format!(
                "label row of length {}, expected {n_labels}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            if let Some(y) = v {
                stats[j].0 += 1;
                stats[j].1 += usize::from(*y == 1);
            }
        }
    }
    Ok(stats)
}
