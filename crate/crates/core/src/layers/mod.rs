//! Differentiable layer zoo: every forward pass the architecture needs, each
//! with an analytic backward pass, plus a finite-difference gradient checker.
//!
//! Layers own their parameters ([`Param`]) and a cache *stack*: each forward
//! pushes the intermediates its backward needs, each backward pops. Calling
//! the same layer several times before backpropagating (weight sharing) is
//! therefore legal as long as backwards run in reverse call order, and
//! parameter gradients accumulate across the pops.

mod activations;
mod conv;
mod dense;
mod dropout;
mod gradcheck;
mod pool;
mod shape_ops;

pub use activations::{relu, sigmoid, Relu, Sigmoid};
pub use conv::{
    conv1d_forward, depthwise_conv1d_forward, dps_conv1d_forward, dps_conv_param_count,
    pointwise_conv1d_forward, standard_conv_param_count, Conv1d, DepthwiseConv1d, DpsConv1d,
    PointwiseConv1d,
};
pub use dense::{dense_forward, Dense};
pub use dropout::Dropout;
pub use gradcheck::{check_gradients, layer_suite, GradReport, GradTarget};
pub use pool::{global_avg_pool, global_max_pool, GlobalAvgPool, GlobalMaxPool};
pub use shape_ops::{concat, flatten, split};

use crate::tensor::{Scalar, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: String,
        expected: String,
        got: String,
    },
    #[error("backward called without a matching forward on `{0}`")]
    BackwardWithoutForward(String),
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub(crate) fn shape_err(op: &str, expected: impl Into<String>, got: impl Into<String>) -> LayerError {
    LayerError::Shape {
        op: op.to_string(),
        expected: expected.into(),
        got: got.into(),
    }
}

/// Whether a layer is being run for optimization or for inference. Inference
/// is fully deterministic (dropout becomes the identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Role of a parameter tensor; decides which regularization penalty, if any,
/// applies to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Fully-connected weight matrix (L1-penalized).
    DenseWeight,
    /// Depthwise convolution kernel (L2-penalized).
    DepthwiseKernel,
    /// Standard convolution kernel (unpenalized).
    ConvKernel,
    /// Pointwise projection kernel (unpenalized).
    PointwiseKernel,
    /// Any bias vector (never penalized).
    Bias,
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            kind,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }
}

/// Common surface every layer exposes to the optimizer and the checkpointing
/// code. Parameterless layers return empty vectors.
pub trait Layer<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Drops any cached forward intermediates (aborted passes, inference).
    fn reset_cache(&mut self);

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Padding policy of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output length is ceil(L / stride).
    Same,
    /// No padding; output length is floor((L - k) / stride) + 1.
    Valid,
}

/// Convolution kind tag, used by model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
    DepthwiseSeparable,
}

/// Geometry of a 1-d convolution over a [L, M] input.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_filters: usize,
    pub padding: Padding,
    pub kind: ConvKind,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<(), LayerError> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_filters == 0 {
            return Err(LayerError::Spec(format!(
                "conv spec fields must be positive: {self:?}"
            )));
        }
        if self.kind == ConvKind::Pointwise && self.kernel != 1 {
            return Err(LayerError::Spec(format!(
                "pointwise convolution requires kernel 1, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Output length for an input of length `l`.
    pub fn out_len(&self, l: usize) -> Result<usize, LayerError> {
        match self.padding {
            Padding::Same => Ok(l.div_ceil(self.stride)),
            Padding::Valid => {
                if l < self.kernel {
                    Err(shape_err(
                        "conv1d",
                        format!("input length >= kernel {}", self.kernel),
                        format!("length {l} under valid padding"),
                    ))
                } else {
                    Ok((l - self.kernel) / self.stride + 1)
                }
            }
        }
    }

    /// Left zero-pad count; total padding follows the ceil-length convention.
    pub fn pad_left(&self, l: usize) -> Result<usize, LayerError> {
        match self.padding {
            Padding::Valid => Ok(0),
            Padding::Same => {
                let out = self.out_len(l)?;
                let span = (out - 1) * self.stride + self.kernel;
                Ok(span.saturating_sub(l) / 2)
            }
        }
    }
}
