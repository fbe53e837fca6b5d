//! Elementwise activations.

use super::{shape_err, Layer, LayerError, Param};
use crate::tensor::{Scalar, Tensor};

/// Elementwise max(0, x).
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.maximum(T::ZERO);
    }
    out
}

fn sigmoid_one<T: Scalar>(v: T) -> T {
    // Stable in both tails: never exponentiates a positive argument.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Elementwise logistic function, 1/(1+e^-x), stable for large |x|.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_one(*v);
    }
    out
}

/// Rectified linear unit with an analytic backward. The derivative at exactly
/// zero is taken as zero; the gradient checker excludes that point.
#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar> {
    pub name: String,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new(name: &str) -> Self {
        Relu {
            name: name.to_string(),
            cache: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        self.cache.push(x.clone());
        Ok(relu(x))
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let x = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        if up.shape() != x.shape() {
            return Err(shape_err(
                "relu backward",
                format!("{:?}", x.shape()),
                format!("{:?}", up.shape()),
            ));
        }
        let mut dx = up.clone();
        for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
            if xv <= T::ZERO {
                *d = T::ZERO;
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
    fn reset_cache(&mut self) {
        self.cache.clear();
    }
}

/// Logistic activation with an analytic backward (caches the output).
#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T: Scalar> {
    pub name: String,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new(name: &str) -> Self {
        Sigmoid {
            name: name.to_string(),
            cache: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let y = sigmoid(x);
        self.cache.push(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let y = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        if up.shape() != y.shape() {
            return Err(shape_err(
                "sigmoid backward",
                format!("{:?}", y.shape()),
                format!("{:?}", up.shape()),
            ));
        }
        let mut dx = up.clone();
        for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= yv * (T::ONE - yv);
        }
        Ok(dx)
    }
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
    fn reset_cache(&mut self) {
        self.cache.clear();
    }
}
