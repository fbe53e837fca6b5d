//! Raw variable-length windows to fixed-size model inputs.
//!
//! IMU windows are zero-padded at the tail to 800 rows (truncated to 800 if
//! longer, keeping the earliest samples). MFCC windows with at least 20
//! frames are tiled cyclically along time to exactly 420; shorter ones are
//! discarded rather than fabricated.

use super::{DataError, Instance, IMU_CH, IMU_LEN, MFCC_CH, MFCC_LEN, MFCC_MIN_FRAMES};
use crate::tensor::Tensor;

/// An instance as it arrives from an export: window lengths are whatever the
/// recording produced.
#[derive(Debug, Clone)]
pub struct RawInstance {
    pub id: String,
    pub user: String,
    pub acc: Tensor<f32>,
    pub gyro: Tensor<f32>,
    pub mfcc: Tensor<f32>,
    pub ps: Tensor<f32>,
    pub labels: Vec<Option<u8>>,
}

/// Outcome of preprocessing: a fixed-size instance, or a deliberate skip
/// with its reason (currently only `"mfcc_too_short"`).
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Ready(Instance),
    Discard { id: String, reason: String },
}

impl Prepared {
    pub fn ready(self) -> Option<Instance> {
        match self {
            Prepared::Ready(i) => Some(i),
            Prepared::Discard { .. } => None,
        }
    }
}

fn check_window(id: &str, name: &str, t: &Tensor<f32>, ch: usize) -> Result<(), DataError> {
    let ok = t.rank() == 2 && t.dim(0) >= 1 && t.dim(1) == ch;
    if !ok {
        return Err(DataError::Malformed {
            id: id.to_string(),
            what: format!("{name} shape {:?}, expected [len >= 1, {ch}]", t.shape()),
        });
    }
    Ok(())
}

/// Tail-pads with zero rows to `rows`, or truncates keeping the head.
fn pad_or_truncate(t: &Tensor<f32>, rows: usize) -> Tensor<f32> {
    let (l, c) = (t.dim(0), t.dim(1));
    let mut out = Tensor::zeros(&[rows, c]);
    for i in 0..l.min(rows) {
        for j in 0..c {
            out.set2(i, j, t.get2(i, j));
        }
    }
    out
}

/// Repeats the window cyclically along time and cuts at `rows`.
fn tile_cyclic(t: &Tensor<f32>, rows: usize) -> Tensor<f32> {
    let (l, c) = (t.dim(0), t.dim(1));
    let mut out = Tensor::zeros(&[rows, c]);
    for i in 0..rows {
        for j in 0..c {
            out.set2(i, j, t.get2(i % l, j));
        }
    }
    out
}

/// Normalizes a raw instance to the fixed window sizes. Malformed channel
/// counts are errors; an MFCC window under 20 frames is a [`Prepared::Discard`].
/// Idempotent: running the output through again reproduces it bit-for-bit.
pub fn preprocess(raw: RawInstance) -> Result<Prepared, DataError> {
    check_window(&raw.id, "acc", &raw.acc, IMU_CH)?;
    check_window(&raw.id, "gyro", &raw.gyro, IMU_CH)?;
    check_window(&raw.id, "mfcc", &raw.mfcc, MFCC_CH)?;
    if raw.ps.rank() != 1 {
        return Err(DataError::Malformed {
            id: raw.id,
            what: format!("ps shape {:?}, expected rank 1", raw.ps.shape()),
        });
    }
    if raw.mfcc.dim(0) < MFCC_MIN_FRAMES {
        return Ok(Prepared::Discard {
            id: raw.id,
            reason: "mfcc_too_short".into(),
        });
    }
    Ok(Prepared::Ready(Instance {
        acc: pad_or_truncate(&raw.acc, IMU_LEN),
        gyro: pad_or_truncate(&raw.gyro, IMU_LEN),
        mfcc: tile_cyclic(&raw.mfcc, MFCC_LEN),
        ps: raw.ps,
        id: raw.id,
        user: raw.user,
        labels: raw.labels,
    }))
}
