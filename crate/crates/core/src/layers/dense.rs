//! Fully-connected layer over batched inputs.

use super::{shape_err, Layer, LayerError, Param, ParamKind};
use crate::tensor::{matmul, xavier_init, Rng, Scalar, Tensor};

/// Standard affine map: out = x * w + b over a [B, D] batch.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) {
        return Err(shape_err(
            "dense",
            "x [B, D] and w [D, U]",
            format!("{:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let u = w.dim(1);
    if b.shape() != [u] {
        return Err(shape_err("dense", format!("bias [{u}]"), format!("{:?}", b.shape())));
    }
    let mut out = matmul(x, w)?;
    let bsz = out.dim(0);
    for i in 0..bsz {
        for j in 0..u {
            let idx = out.idx2(i, j);
            out.data_mut()[idx] += b.data()[j];
        }
    }
    Ok(out)
}

/// Fully-connected layer with weights [D, U] and bias [U]. Repeated forwards
/// before a backward are allowed (weight sharing); gradients accumulate.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    pub name: String,
    pub w: Param<T>,
    pub b: Param<T>,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, in_dim: usize, units: usize, rng: &mut Rng) -> Result<Self, LayerError> {
        let w = xavier_init(in_dim, units, rng)?;
        Ok(Dense {
            name: name.to_string(),
            w: Param::new(format!("{name}.w"), ParamKind::DenseWeight, w),
            b: Param::new(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[units])),
            cache: Vec::new(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.dim(0)
    }

    pub fn units(&self) -> usize {
        self.w.value.dim(1)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let out = dense_forward(x, &self.w.value, &self.b.value)?;
        self.cache.push(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let x = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        let (bsz, u) = (x.dim(0), self.units());
        if up.shape() != [bsz, u] {
            return Err(shape_err(
                "dense backward",
                format!("upstream [{bsz}, {u}]"),
                format!("{:?}", up.shape()),
            ));
        }
        self.w.grad.add_in_place(&matmul(&x.transpose2(), up)?)?;
        for i in 0..bsz {
            for j in 0..u {
                self.b.grad.data_mut()[j] += up.get2(i, j);
            }
        }
        Ok(matmul(up, &self.w.value.transpose2())?)
    }

    pub fn param_count(&self) -> usize {
        self.w.value.len() + self.b.value.len()
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
    fn reset_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), x.data());
    }

    #[test]
    fn zero_input_rows_equal_bias() {
        let x = Tensor::<f64>::zeros(&[3, 4]);
        let w = Tensor::filled(&[4, 2], 9.0);
        let b = Tensor::from_vec(&[2], vec![1.5, -2.5]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            assert_eq!(y.get2(i, 0), 1.5);
            assert_eq!(y.get2(i, 1), -2.5);
        }
    }

    #[test]
    fn one_by_two_dot_case() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![3.0, 5.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[14.0]);
    }

    #[test]
    fn identity_layer_passes_gradient_through() {
        let mut rng = Rng::new(3);
        let mut d = Dense::<f64>::new("d", 2, 2, &mut rng).unwrap();
        d.w.value = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        d.b.value.fill(0.0);
        let x = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        d.forward(&x).unwrap();
        let up = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dx = d.backward(&up).unwrap();
        assert_eq!(dx.data(), up.data());
    }

    #[test]
    fn shared_use_accumulates_gradients() {
        let mut rng = Rng::new(4);
        let mut d = Dense::<f64>::new("d", 3, 2, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        d.forward(&x).unwrap();
        d.forward(&x).unwrap();
        let up = Tensor::filled(&[1, 2], 1.0);
        d.backward(&up).unwrap();
        let after_one = d.w.grad.clone();
        d.backward(&up).unwrap();
        for (g2, g1) in d.w.grad.data().iter().zip(after_one.data()) {
            assert!((g2 - 2.0 * g1).abs() < 1e-12);
        }
    }
}
