//! Multi-stream model assembly: per-modality encoders, five fusion modes,
//! the shared contextualization head, and the multi-task variant that keeps
//! working when sensors are missing.
//!
//! Stream geometry is fixed: accelerometer and gyroscope windows are 800x3
//! and go through two stride-2 temporal conv layers (kernels 64/32, filters
//! 32/64); audio MFCC windows are 420x13 with kernels 8/6; the phone-state
//! vector feeds a 64-unit fully connected encoder. The shared head is
//! 2048/1024 hidden units into a 51-way sigmoid output.

mod checkpoint;
mod gradcheck;
mod net;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, read_manifest, Manifest, ParamEntry,
    CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{model_gradcheck, ModelProbe};
pub use net::Model;

use crate::layers::LayerError;
use crate::objective::ObjectiveError;
use crate::tensor::{Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("bad batch: {0}")]
    Batch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown tap '{0}'")]
    UnknownTap(String),
}

/// Input modality. The declaration order here is the canonical stream order
/// used everywhere (batch layout, fusion concatenation, parameter traversal).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Acc,
    Gyro,
    Aud,
    Ps,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Acc, Modality::Gyro, Modality::Aud, Modality::Ps];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Acc => "acc",
            Modality::Gyro => "gyro",
            Modality::Aud => "aud",
            Modality::Ps => "ps",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "acc" => Some(Modality::Acc),
            "gyro" => Some(Modality::Gyro),
            "aud" => Some(Modality::Aud),
            "ps" => Some(Modality::Ps),
            _ => None,
        }
    }

    /// Temporal streams carry [len, channels] windows; ps is a flat vector.
    pub fn is_temporal(self) -> bool {
        self != Modality::Ps
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvChoice {
    /// Depthwise-separable temporal convolutions (the default).
    Dps,
    /// Plain temporal convolutions with the same geometry.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Global max pooling per temporal stream, concatenated.
    Gmp,
    /// Global average pooling per temporal stream, concatenated.
    Gap,
    /// A 128-unit FC layer on each flattened temporal stream, concatenated.
    Fc,
    /// Flattened temporal maps concatenated directly.
    Flattened,
    /// Time-axis concatenation of the temporal maps, one shared standard
    /// conv (k=8, 64 filters, stride 2), then GMP. Temporal streams only.
    Conv,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Gmp => "gmp",
            Fusion::Gap => "gap",
            Fusion::Fc => "fc",
            Fusion::Flattened => "flattened",
            Fusion::Conv => "conv",
        }
    }
}

/// Fixed two-layer geometry of a temporal stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamGeom {
    pub input_len: usize,
    pub input_ch: usize,
    pub k1: usize,
    pub f1: usize,
    pub k2: usize,
    pub f2: usize,
    pub stride: usize,
}

impl StreamGeom {
    /// Output length of the first conv layer (same padding).
    pub fn l1(&self) -> usize {
        self.input_len.div_ceil(self.stride)
    }

    /// Output length of the second conv layer (same padding).
    pub fn l2(&self) -> usize {
        self.l1().div_ceil(self.stride)
    }

    /// Size of the flattened second-layer map.
    pub fn flat_dim(&self) -> usize {
        self.l2() * self.f2
    }
}

/// Geometry for a temporal modality; `None` for the vector modality (ps).
pub fn stream_geometry(m: Modality) -> Option<StreamGeom> {
    match m {
        Modality::Acc | Modality::Gyro => Some(StreamGeom {
            input_len: 800,
            input_ch: 3,
            k1: 64,
            f1: 32,
            k2: 32,
            f2: 64,
            stride: 2,
        }),
        Modality::Aud => Some(StreamGeom {
            input_len: 420,
            input_ch: 13,
            k1: 8,
            f1: 32,
            k2: 6,
            f2: 64,
            stride: 2,
        }),
        Modality::Ps => None,
    }
}

/// Default units of the ps encoder and of every pooled temporal feature
/// vector; tracks the second-layer filter count.
pub const VECTOR_UNITS: usize = 64;
/// Hidden size of the per-stream FC used by `Fusion::Fc`.
pub const FC_FUSION_UNITS: usize = 128;
/// Default shared-head hidden sizes for the single-task model.
pub const SHARED_UNITS: (usize, usize) = (2048, 1024);
/// Default (kernel, filters, stride) of the fusion conv used by
/// `Fusion::Conv`.
pub const CONV_FUSION: (usize, usize, usize) = (8, 64, 2);
/// Default shared-layer width of the multi-task variant.
pub const MULTI_SHARED_UNITS: usize = 1024;
/// Default task-layer width for temporal modalities in the multi-task
/// variant.
pub const TASK_UNITS_TEMPORAL: usize = 128;
/// Default task-layer width for the ps modality in the multi-task variant.
pub const TASK_UNITS_PS: usize = 64;

fn default_modalities() -> Vec<Modality> {
    Modality::ALL.to_vec()
}
fn default_label_count() -> usize {
    51
}
// Placeholder only: every dataset-driven path overrides this with the width
// declared in the dataset manifest.
fn default_ps_width() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.2
}
fn default_reg_rate() -> f64 {
    1e-4
}
fn default_conv_kind() -> ConvChoice {
    ConvChoice::Dps
}
fn default_fusion() -> Fusion {
    Fusion::Gmp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
    #[serde(default = "default_conv_kind")]
    pub conv_kind: ConvChoice,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    #[serde(default)]
    pub multi_task: bool,
    #[serde(default = "default_label_count")]
    pub label_count: usize,
    #[serde(default = "default_ps_width")]
    pub ps_width: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_reg_rate")]
    pub l1_dense: f64,
    #[serde(default = "default_reg_rate")]
    pub l2_depthwise: f64,
    /// Overrides the [f1, f2] filter counts of every temporal stream. f2 is
    /// also the width of each pooled feature vector and of the ps encoder,
    /// so a smaller setting shrinks the whole front end coherently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<[usize; 2]>,
    /// Overrides the two shared-head hidden sizes of the single-task model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_units: Option<[usize; 2]>,
    /// Overrides the weight-shared layer width of the multi-task variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_shared_units: Option<usize>,
    /// Overrides the [temporal, ps] task-layer widths of the multi-task
    /// variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_units: Option<[usize; 2]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: default_modalities(),
            conv_kind: default_conv_kind(),
            fusion: default_fusion(),
            multi_task: false,
            label_count: default_label_count(),
            ps_width: default_ps_width(),
            dropout: default_dropout(),
            l1_dense: default_reg_rate(),
            l2_depthwise: default_reg_rate(),
            filters: None,
            shared_units: None,
            multi_shared_units: None,
            task_units: None,
        }
    }
}

impl ModelConfig {
    /// Canonical form: modalities sorted and deduplicated, config validated.
    pub fn normalized(&self) -> Result<ModelConfig, ModelError> {
        let mut out = self.clone();
        out.modalities.sort();
        out.modalities.dedup();
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let cfg = |msg: String| Err(ModelError::Config(msg));
        if self.modalities.is_empty() {
            return cfg("at least one modality is required".into());
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return cfg(format!("duplicate modality in {:?}", self.modalities));
        }
        if self.label_count == 0 {
            return cfg("label_count must be positive".into());
        }
        if self.modalities.contains(&Modality::Ps) && self.ps_width == 0 {
            return cfg("ps_width must be positive when the ps modality is used".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.l1_dense < 0.0 || self.l2_depthwise < 0.0 {
            return cfg("regularization rates must be non-negative".into());
        }
        let n_temporal = self.modalities.iter().filter(|m| m.is_temporal()).count();
        if self.fusion == Fusion::Conv && n_temporal == 0 {
            return cfg("fusion = conv needs at least one temporal modality (acc/gyro/aud)".into());
        }
        if self.multi_task && !matches!(self.fusion, Fusion::Gmp | Fusion::Gap) {
            return cfg(format!(
                "the multi-task variant pools each stream to a fixed vector; fusion must be gmp or gap, got {}",
                self.fusion.name()
            ));
        }
        if self.filters.is_some_and(|f| f.contains(&0)) {
            return cfg("filters entries must be positive".into());
        }
        if self.shared_units.is_some_and(|u| u.contains(&0)) {
            return cfg("shared_units entries must be positive".into());
        }
        if self.multi_shared_units == Some(0) {
            return cfg("multi_shared_units must be positive".into());
        }
        if self.task_units.is_some_and(|u| u.contains(&0)) {
            return cfg("task_units entries must be positive".into());
        }
        Ok(())
    }

    pub fn temporal_modalities(&self) -> Vec<Modality> {
        self.modalities
            .iter()
            .copied()
            .filter(|m| m.is_temporal())
            .collect()
    }

    /// Effective [f1, f2] filter counts of the temporal streams.
    pub fn stream_filters(&self) -> [usize; 2] {
        self.filters.unwrap_or([32, VECTOR_UNITS])
    }

    /// Width of the ps encoder and of every pooled temporal vector: the
    /// second-layer filter count.
    pub fn vector_units(&self) -> usize {
        self.stream_filters()[1]
    }

    /// Effective shared-head hidden sizes (single-task).
    pub fn shared_widths(&self) -> (usize, usize) {
        match self.shared_units {
            Some([u1, u2]) => (u1, u2),
            None => SHARED_UNITS,
        }
    }

    /// Effective weight-shared layer width (multi-task).
    pub fn multi_shared(&self) -> usize {
        self.multi_shared_units.unwrap_or(MULTI_SHARED_UNITS)
    }

    /// Effective task-layer width for a modality (multi-task).
    pub fn task_width(&self, m: Modality) -> usize {
        let [temporal, ps] = self
            .task_units
            .unwrap_or([TASK_UNITS_TEMPORAL, TASK_UNITS_PS]);
        if m.is_temporal() {
            temporal
        } else {
            ps
        }
    }

    /// Effective (kernel, filters, stride) of the fusion conv. Its filter
    /// count follows the stream width so the pooled block stays uniform.
    pub fn conv_fusion(&self) -> (usize, usize, usize) {
        let (k, _, stride) = CONV_FUSION;
        (k, self.vector_units(), stride)
    }

    /// Geometry for a temporal modality under this config's filter counts;
    /// `None` for the vector modality (ps).
    pub fn stream_geom(&self, m: Modality) -> Option<StreamGeom> {
        let [f1, f2] = self.stream_filters();
        stream_geometry(m).map(|g| StreamGeom { f1, f2, ..g })
    }

    /// Width of the per-modality feature block entering the shared net.
    pub fn feature_width(&self, m: Modality) -> usize {
        match (m, self.fusion) {
            (Modality::Ps, _) => self.vector_units(),
            (_, Fusion::Gmp | Fusion::Gap | Fusion::Conv) => self.vector_units(),
            (_, Fusion::Fc) => FC_FUSION_UNITS,
            (_, Fusion::Flattened) => self.stream_geom(m).expect("temporal").flat_dim(),
        }
    }

    /// Total width of the fused vector entering the shared head
    /// (single-task). Under conv fusion all temporal streams collapse into
    /// one pooled block.
    pub fn fused_width(&self) -> usize {
        match self.fusion {
            Fusion::Conv => {
                let ps = self.modalities.contains(&Modality::Ps);
                self.vector_units() + if ps { self.vector_units() } else { 0 }
            }
            _ => self
                .modalities
                .iter()
                .map(|&m| self.feature_width(m))
                .sum(),
        }
    }
}

/// A mini-batch of per-modality inputs. An empty vector means the modality
/// is absent from the batch; present modalities must agree on the instance
/// count. Temporal entries are [len, channels] windows, ps entries are flat
/// [ps_width] vectors.
#[derive(Debug, Clone, Default)]
pub struct Batch<T: Scalar> {
    pub acc: Vec<Tensor<T>>,
    pub gyro: Vec<Tensor<T>>,
    pub aud: Vec<Tensor<T>>,
    pub ps: Vec<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new() -> Self {
        Batch {
            acc: Vec::new(),
            gyro: Vec::new(),
            aud: Vec::new(),
            ps: Vec::new(),
        }
    }

    pub fn modality(&self, m: Modality) -> &[Tensor<T>] {
        match m {
            Modality::Acc => &self.acc,
            Modality::Gyro => &self.gyro,
            Modality::Aud => &self.aud,
            Modality::Ps => &self.ps,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut Vec<Tensor<T>> {
        match m {
            Modality::Acc => &mut self.acc,
            Modality::Gyro => &mut self.gyro,
            Modality::Aud => &mut self.aud,
            Modality::Ps => &mut self.ps,
        }
    }

    /// Modalities carried by this batch, in canonical order.
    pub fn present(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|&m| !self.modality(m).is_empty())
            .collect()
    }

    /// Instance count, requiring every modality in `needed` to be present
    /// and all present modalities to agree.
    pub fn size_for(&self, needed: &[Modality]) -> Result<usize, ModelError> {
        for &m in needed {
            if self.modality(m).is_empty() {
                return Err(ModelError::Batch(format!("modality {m} missing from batch")));
            }
        }
        let mut size = None;
        for m in Modality::ALL {
            let v = self.modality(m);
            if v.is_empty() {
                continue;
            }
            match size {
                None => size = Some(v.len()),
                Some(s) if s != v.len() => {
                    return Err(ModelError::Batch(format!(
                        "modality {m} has {} instances, expected {s}",
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        size.ok_or_else(|| ModelError::Batch("empty batch".into()))
    }
}
