//! Instance-weighted, missing-label-masked multi-label cross-entropy and the
//! L1/L2 regularization penalties.
//!
//! Missing labels are a first-class state: they contribute exactly zero to
//! the loss, the gradient, and the weight matrix, no matter what value the
//! storage happens to hold for them.

use crate::layers::{Param, ParamKind};
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty label matrix")]
    EmptyLabels,
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite prediction at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("prediction {value} at ({row}, {col}) outside (0, 1)")]
    OutOfRange { row: usize, col: usize, value: f64 },
}

/// N x C label matrix whose entries are 0, 1, or missing. The stored value
/// plane is kept separate from the presence mask so that missing entries can
/// hold arbitrary garbage without ever influencing a computation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    n: usize,
    c: usize,
    values: Vec<f64>,
    present: Vec<bool>,
}

impl LabelMatrix {
    /// All-missing matrix.
    pub fn new(n: usize, c: usize) -> Self {
        LabelMatrix {
            n,
            c,
            values: vec![0.0; n * c],
            present: vec![false; n * c],
        }
    }

    /// Builds from rows of `Some(0/1)` / `None` entries.
    pub fn from_rows(rows: &[Vec<Option<u8>>]) -> Result<Self, ObjectiveError> {
        let n = rows.len();
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if n == 0 || c == 0 {
            return Err(ObjectiveError::EmptyLabels);
        }
        let mut m = LabelMatrix::new(n, c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(ObjectiveError::Shape {
                    op: "labels_from_rows",
                    expected: format!("{c} labels per row"),
                    got: format!("{} in row {i}", row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    Some(b) => m.set(i, j, Some(b != 0)),
                    None => m.set(i, j, None),
                }
            }
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_labels(&self) -> usize {
        self.c
    }

    pub fn set(&mut self, i: usize, j: usize, v: Option<bool>) {
        let idx = i * self.c + j;
        match v {
            Some(b) => {
                self.values[idx] = if b { 1.0 } else { 0.0 };
                self.present[idx] = true;
            }
            None => {
                self.present[idx] = false;
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let idx = i * self.c + j;
        self.present[idx].then(|| self.values[idx])
    }

    pub fn is_present(&self, i: usize, j: usize) -> bool {
        self.present[i * self.c + j]
    }

    /// Overwrites the *stored* value without touching the presence mask.
    /// Rewrites of missing entries must be observationally invisible; tests
    /// rely on this to verify mask totality.
    pub fn set_stored_value(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.c + j] = v;
    }

    /// Present (positive, negative) counts for label column `j`.
    pub fn column_counts(&self, j: usize) -> (usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        for i in 0..self.n {
            if let Some(v) = self.get(i, j) {
                if v == 1.0 {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
        (pos, neg)
    }

    /// Row subset in the given order (batch assembly).
    pub fn select_rows(&self, idx: &[usize]) -> LabelMatrix {
        let mut out = LabelMatrix::new(idx.len(), self.c);
        for (dst, &src) in idx.iter().enumerate() {
            for j in 0..self.c {
                let s = src * self.c + j;
                let d = dst * self.c + j;
                out.values[d] = self.values[s];
                out.present[d] = self.present[s];
            }
        }
        out
    }
}

/// Per-(instance, label) loss weights; zero exactly where the label is
/// missing.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    c: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    /// Weight 1 on present entries, 0 on missing (the weighting-off setting).
    pub fn uniform(labels: &LabelMatrix) -> Self {
        let (n, c) = (labels.n_rows(), labels.n_labels());
        let mut w = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                if labels.is_present(i, j) {
                    w[i * c + j] = 1.0;
                }
            }
        }
        WeightMatrix { n, c, w }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.c + j]
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_labels(&self) -> usize {
        self.c
    }

    pub fn select_rows(&self, idx: &[usize]) -> WeightMatrix {
        let mut w = Vec::with_capacity(idx.len() * self.c);
        for &src in idx {
            w.extend_from_slice(&self.w[src * self.c..(src + 1) * self.c]);
        }
        WeightMatrix {
            n: idx.len(),
            c: self.c,
            w,
        }
    }
}

/// Inverse-class-frequency weights. For label c with P present positives and
/// G present negatives (A = P + G): positives get A/(2P), negatives A/(2G),
/// missing entries 0. A one-class column gets weight 1 on present entries, so
/// its aggregate contribution stays bounded. Computed from the training fold
/// only — never from validation or test rows.
pub fn compute_instance_weights(labels: &LabelMatrix) -> Result<WeightMatrix, ObjectiveError> {
    let (n, c) = (labels.n_rows(), labels.n_labels());
    if n == 0 || c == 0 {
        return Err(ObjectiveError::EmptyLabels);
    }
    let mut w = vec![0.0; n * c];
    for j in 0..c {
        let (p, g) = labels.column_counts(j);
        let a = (p + g) as f64;
        let (w_pos, w_neg) = if p == 0 || g == 0 {
            (1.0, 1.0) // degenerate column: nothing to balance
        } else {
            (a / (2.0 * p as f64), a / (2.0 * g as f64))
        };
        for i in 0..n {
            if let Some(v) = labels.get(i, j) {
                w[i * c + j] = if v == 1.0 { w_pos } else { w_neg };
            }
        }
    }
    Ok(WeightMatrix { n, c, w })
}

fn check_pred_shape<T: Scalar>(
    op: &'static str,
    pred: &Tensor<T>,
    labels: &LabelMatrix,
    psi: &WeightMatrix,
) -> Result<(), ObjectiveError> {
    let want = [labels.n_rows(), labels.n_labels()];
    if pred.rank() != 2 || pred.shape() != want {
        return Err(ObjectiveError::Shape {
            op,
            expected: format!("{want:?}"),
            got: format!("{:?}", pred.shape()),
        });
    }
    if psi.n_rows() != labels.n_rows() || psi.n_labels() != labels.n_labels() {
        return Err(ObjectiveError::Shape {
            op,
            expected: format!("weights {want:?}"),
            got: format!("[{}, {}]", psi.n_rows(), psi.n_labels()),
        });
    }
    Ok(())
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted masked cross-entropy evaluated from logits with the
/// log-sum-exp-stable form:
///
///   L(z, y) = max(z, 0) - z*y + ln(1 + e^-|z|)
///
/// Returns the scalar loss (1/(N*C) * sum of psi * L) and its gradient with
/// respect to the logits, psi * (sigmoid(z) - y) / (N*C). This is the
/// canonical training path; the probability-space wrapper below chains the
/// same quantities through the sigmoid.
pub fn weighted_masked_bce_from_logits<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMatrix,
    psi: &WeightMatrix,
) -> Result<(f64, Tensor<T>), ObjectiveError> {
    check_pred_shape("weighted_masked_bce_from_logits", logits, labels, psi)?;
    let (n, c) = (labels.n_rows(), labels.n_labels());
    let scale = 1.0 / (n as f64 * c as f64);
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for j in 0..c {
            let Some(y) = labels.get(i, j) else { continue };
            let w = psi.get(i, j);
            if w == 0.0 {
                continue;
            }
            let z = logits.get2(i, j).to_f64();
            if !z.is_finite() {
                return Err(ObjectiveError::NonFinite { row: i, col: j });
            }
            let lce = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            loss += w * lce;
            grad.set2(i, j, T::from_f64(w * (sigmoid_f64(z) - y) * scale));
        }
    }
    Ok((loss * scale, grad))
}

/// Probability-space entry point: predictions must lie strictly inside
/// (0, 1). Internally converts to logits, evaluates the stable form, and
/// chains the gradient back through the sigmoid, returning d loss / d pred.
pub fn weighted_masked_bce<T: Scalar>(
    predictions: &Tensor<T>,
    labels: &LabelMatrix,
    psi: &WeightMatrix,
) -> Result<(f64, Tensor<T>), ObjectiveError> {
    check_pred_shape("weighted_masked_bce", predictions, labels, psi)?;
    let (n, c) = (labels.n_rows(), labels.n_labels());
    let mut logits = Tensor::<T>::zeros(&[n, c]);
    for i in 0..n {
        for j in 0..c {
            let p = predictions.get2(i, j).to_f64();
            if !p.is_finite() {
                return Err(ObjectiveError::NonFinite { row: i, col: j });
            }
            // Only present entries feed the loss, but a prediction outside
            // (0,1) is malformed wherever it appears.
            if p <= 0.0 || p >= 1.0 {
                return Err(ObjectiveError::OutOfRange {
                    row: i,
                    col: j,
                    value: p,
                });
            }
            logits.set2(i, j, T::from_f64(p.ln() - (-p).ln_1p()));
        }
    }
    let (loss, dz) = weighted_masked_bce_from_logits(&logits, labels, psi)?;
    let mut grad = dz;
    for i in 0..n {
        for j in 0..c {
            let p = predictions.get2(i, j).to_f64();
            let g = grad.get2(i, j).to_f64();
            grad.set2(i, j, T::from_f64(g / (p * (1.0 - p))));
        }
    }
    Ok((loss, grad))
}

/// Which penalty applies to which parameter kind: L1 on fully-connected
/// weights, L2 on depthwise kernels, biases and remaining kernels exempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegPolicy {
    pub l1_dense: f64,
    pub l2_depthwise: f64,
}

impl RegPolicy {
    pub fn new(l1_dense: f64, l2_depthwise: f64) -> Self {
        RegPolicy {
            l1_dense,
            l2_depthwise,
        }
    }

    /// The regularization-off setting.
    pub fn off() -> Self {
        RegPolicy::new(0.0, 0.0)
    }
}

impl Default for RegPolicy {
    fn default() -> Self {
        RegPolicy::new(1e-4, 1e-4)
    }
}

/// Penalty value without touching gradients.
pub fn regularization_value<T: Scalar>(params: &[&Param<T>], policy: &RegPolicy) -> f64 {
    let mut penalty = 0.0f64;
    for p in params {
        match p.kind {
            ParamKind::DenseWeight if policy.l1_dense > 0.0 => {
                let s: f64 = p.value.data().iter().map(|v| v.to_f64().abs()).sum();
                penalty += policy.l1_dense * s;
            }
            ParamKind::DepthwiseKernel if policy.l2_depthwise > 0.0 => {
                let s: f64 = p.value.data().iter().map(|v| v.to_f64().powi(2)).sum();
                penalty += policy.l2_depthwise * s;
            }
            _ => {}
        }
    }
    penalty
}

/// Adds penalty gradients in place and returns the penalty value:
/// l1 * |w| over dense weights (subgradient 0 at w = 0) plus
/// l2 * w^2 over depthwise kernels.
pub fn regularization_penalty<T: Scalar>(params: &mut [&mut Param<T>], policy: &RegPolicy) -> f64 {
    let mut penalty = 0.0f64;
    for p in params.iter_mut() {
        match p.kind {
            ParamKind::DenseWeight if policy.l1_dense > 0.0 => {
                let rate = T::from_f64(policy.l1_dense);
                let mut s = 0.0f64;
                for (g, &v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                    s += v.to_f64().abs();
                    if v > T::ZERO {
                        *g += rate;
                    } else if v < T::ZERO {
                        *g -= rate;
                    }
                }
                penalty += policy.l1_dense * s;
            }
            ParamKind::DepthwiseKernel if policy.l2_depthwise > 0.0 => {
                let two_rate = T::from_f64(2.0 * policy.l2_depthwise);
                let mut s = 0.0f64;
                for (g, &v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                    s += v.to_f64().powi(2);
                    *g += two_rate * v;
                }
                penalty += policy.l2_depthwise * s;
            }
            _ => {}
        }
    }
    penalty
}
