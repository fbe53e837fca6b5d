//! Global pooling over the time axis of a [L, C] feature map.

use super::{shape_err, Layer, LayerError, Param};
use crate::tensor::{Scalar, Tensor};

/// Per-channel max over time. Backward routes the gradient only to the
/// earliest argmax row of each channel (deterministic tie-break).
#[derive(Debug, Clone, Default)]
pub struct GlobalMaxPool<T: Scalar> {
    pub name: String,
    cache: Vec<(Vec<usize>, usize)>, // (argmax per channel, L)
    _marker: std::marker::PhantomData<T>,
}

/// Per-channel mean over time.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool<T: Scalar> {
    pub name: String,
    cache: Vec<(usize, usize)>, // (L, C)
    _marker: std::marker::PhantomData<T>,
}

fn check_map<T: Scalar>(op: &str, x: &Tensor<T>) -> Result<(), LayerError> {
    if x.rank() != 2 {
        return Err(shape_err(op, "rank-2 [L, C] input", format!("{:?}", x.shape())));
    }
    Ok(())
}

/// Per-channel max over the time axis of a [L, C] map.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    Ok(max_with_argmax(x)?.0)
}

/// Per-channel mean over the time axis of a [L, C] map.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    check_map("global_avg_pool", x)?;
    let (l, c) = (x.dim(0), x.dim(1));
    let inv = T::from_f64(1.0 / l as f64);
    let mut out = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut acc = T::ZERO;
        for i in 0..l {
            acc += x.get2(i, ch);
        }
        out.data_mut()[ch] = acc * inv;
    }
    Ok(out)
}

fn max_with_argmax<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), LayerError> {
    check_map("global_max_pool", x)?;
    let (l, c) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(&[c]);
    let mut arg = vec![0usize; c];
    for ch in 0..c {
        let mut best = x.get2(0, ch);
        let mut best_i = 0usize;
        for i in 1..l {
            let v = x.get2(i, ch);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        out.data_mut()[ch] = best;
        arg[ch] = best_i;
    }
    Ok((out, arg))
}

impl<T: Scalar> GlobalMaxPool<T> {
    pub fn new(name: &str) -> Self {
        GlobalMaxPool {
            name: name.to_string(),
            cache: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let (out, arg) = max_with_argmax(x)?;
        self.cache.push((arg, x.dim(0)));
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let (arg, l) = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        let c = arg.len();
        if up.shape() != [c] {
            return Err(shape_err("global_max_pool backward", format!("[{c}]"), format!("{:?}", up.shape())));
        }
        let mut dx = Tensor::zeros(&[l, c]);
        for ch in 0..c {
            let idx = dx.idx2(arg[ch], ch);
            dx.data_mut()[idx] = up.data()[ch];
        }
        Ok(dx)
    }
}

impl<T: Scalar> GlobalAvgPool<T> {
    pub fn new(name: &str) -> Self {
        GlobalAvgPool {
            name: name.to_string(),
            cache: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let out = global_avg_pool(x)?;
        self.cache.push((x.dim(0), x.dim(1)));
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let (l, c) = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        if up.shape() != [c] {
            return Err(shape_err("global_avg_pool backward", format!("[{c}]"), format!("{:?}", up.shape())));
        }
        let inv = T::from_f64(1.0 / l as f64);
        let mut dx = Tensor::zeros(&[l, c]);
        for i in 0..l {
            for ch in 0..c {
                let idx = dx.idx2(i, ch);
                dx.data_mut()[idx] = up.data()[ch] * inv;
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Layer<T> for GlobalMaxPool<T> {
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

impl<T: Scalar> Layer<T> for GlobalAvgPool<T> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn hand_case() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0f64, 5.0, 3.0, 2.0, 0.0, 4.0]).unwrap();
        assert_eq!(global_max_pool(&x).unwrap().data(), &[3.0, 5.0]);
        let gap = global_avg_pool(&x).unwrap();
        assert!((gap.data()[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((gap.data()[1] - 11.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_gmp_equals_gap() {
        let x = Tensor::<f64>::filled(&[7, 3], 2.5);
        assert_eq!(global_max_pool(&x).unwrap().data(), global_avg_pool(&x).unwrap().data());
    }

    #[test]
    fn time_permutation_invariance() {
        let mut rng = Rng::new(8);
        let n = 9 * 4;
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let x = Tensor::from_vec(&[9, 4], data.clone()).unwrap();
        let mut rows: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut rows);
        let mut permuted = Tensor::<f64>::zeros(&[9, 4]);
        for (dst, &src) in rows.iter().enumerate() {
            for ch in 0..4 {
                permuted.set2(dst, ch, x.get2(src, ch));
            }
        }
        assert_eq!(
            global_max_pool(&x).unwrap().data(),
            global_max_pool(&permuted).unwrap().data()
        );
        let a = global_avg_pool(&x).unwrap();
        let b = global_avg_pool(&permuted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gmp_backward_routes_to_earliest_argmax() {
        let mut pool = GlobalMaxPool::new("p");
        // Channel 0 has a tie at rows 0 and 2; gradient must go to row 0.
        let x = Tensor::from_vec(&[3, 2], vec![7.0f64, 1.0, 2.0, 3.0, 7.0, 2.0]).unwrap();
        pool.forward(&x).unwrap();
        let up = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let dx = pool.backward(&up).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
