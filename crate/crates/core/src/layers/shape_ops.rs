//! Lossless shape plumbing: concatenation, its inverse split, and flatten.

use super::{shape_err, LayerError};
use crate::tensor::{Scalar, Tensor};

/// Concatenates tensors along `axis`. All parts must agree on rank and on
/// every dimension except `axis`.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, LayerError> {
    let first = parts
        .first()
        .ok_or_else(|| LayerError::Spec("concat of zero parts".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(LayerError::Spec(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    let mut out_shape = first.shape().to_vec();
    for p in &parts[1..] {
        if p.rank() != rank {
            return Err(shape_err("concat", format!("rank {rank}"), format!("{:?}", p.shape())));
        }
        for (ax, (&a, &b)) in first.shape().iter().zip(p.shape().iter()).enumerate() {
            if ax != axis && a != b {
                return Err(shape_err(
                    "concat",
                    format!("{:?} up to axis {axis}", first.shape()),
                    format!("{:?}", p.shape()),
                ));
            }
        }
        out_shape[axis] += p.dim(axis);
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.dim(axis) * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_vec(&out_shape, data)?)
}

/// Splits `x` along `axis` into parts of the given sizes; the exact inverse
/// of [`concat`].
pub fn split<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    sizes: &[usize],
) -> Result<Vec<Tensor<T>>, LayerError> {
    if axis >= x.rank() {
        return Err(LayerError::Spec(format!(
            "split axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total != x.dim(axis) {
        return Err(shape_err(
            "split",
            format!("sizes summing to {}", x.dim(axis)),
            format!("{sizes:?}"),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let axis_len = x.dim(axis);
    let mut outputs = Vec::with_capacity(sizes.len());
    let mut offset = 0usize;
    for &sz in sizes {
        let mut shape = x.shape().to_vec();
        shape[axis] = sz;
        let mut data = Vec::with_capacity(outer * sz * inner);
        for o in 0..outer {
            let start = (o * axis_len + offset) * inner;
            data.extend_from_slice(&x.data()[start..start + sz * inner]);
        }
        outputs.push(Tensor::from_vec(&shape, data)?);
        offset += sz;
    }
    Ok(outputs)
}

/// Row-major flatten to a rank-1 vector.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let len = x.len();
    x.clone().reshape(&[len]).expect("flatten preserves length")
}
