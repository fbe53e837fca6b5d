//! Inverted dropout: inference is a pure identity.

use super::{shape_err, Layer, LayerError, Param, Phase};
use crate::tensor::{Rng, Scalar, Tensor};

/// Inverted dropout. In the train phase each element is zeroed with
/// probability `rate` and survivors are scaled by 1/(1-rate); in the infer
/// phase the layer is the identity. Mask draws consume one uniform per
/// element in row-major order, so a reseeded [`Rng`] reproduces the mask.
#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar> {
    pub name: String,
    pub rate: f64,
    // One entry per forward: the scaled mask, or None when the pass was an
    // identity (infer phase or rate 0).
    cache: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(name: &str, rate: f64) -> Result<Self, LayerError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(LayerError::Spec(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout {
            name: name.to_string(),
            rate,
            cache: Vec::new(),
        })
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<Tensor<T>, LayerError> {
        if phase == Phase::Infer || self.rate == 0.0 {
            self.cache.push(None);
            return Ok(x.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mut mask = Tensor::zeros(x.shape());
        for m in mask.data_mut() {
            if rng.next_f64() >= self.rate {
                *m = scale;
            }
        }
        let mut out = x.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        self.cache.push(Some(mask));
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let mask = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        match mask {
            None => Ok(up.clone()),
            Some(mask) => {
                if up.shape() != mask.shape() {
                    return Err(shape_err(
                        "dropout backward",
                        format!("{:?}", mask.shape()),
                        format!("{:?}", up.shape()),
                    ));
                }
                let mut dx = up.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *d *= m;
                }
                Ok(dx)
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
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

    #[test]
    fn rate_zero_is_identity_in_both_phases() {
        let mut d = Dropout::<f64>::new("d", 0.0).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        assert_eq!(d.forward(&x, Phase::Train, &mut rng).unwrap().data(), x.data());
        assert_eq!(d.forward(&x, Phase::Infer, &mut rng).unwrap().data(), x.data());
    }

    #[test]
    fn infer_is_identity_at_any_rate() {
        let mut d = Dropout::<f64>::new("d", 0.7).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(d.forward(&x, Phase::Infer, &mut rng).unwrap().data(), x.data());
    }

    #[test]
    fn rate_one_rejected() {
        assert!(Dropout::<f64>::new("d", 1.0).is_err());
        assert!(Dropout::<f64>::new("d", -0.1).is_err());
    }

    #[test]
    fn train_statistics_match_inverted_dropout() {
        let mut d = Dropout::<f64>::new("d", 0.2).unwrap();
        let mut rng = Rng::new(77);
        let x = Tensor::filled(&[1_000_000], 1.0);
        let y = d.forward(&x, Phase::Train, &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let zero_frac = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zero_frac - 0.2).abs() < 0.002, "zero fraction {zero_frac}");
    }

    #[test]
    fn backward_applies_the_same_mask() {
        let mut d = Dropout::<f64>::new("d", 0.5).unwrap();
        let mut rng = Rng::new(9);
        let x = Tensor::filled(&[64], 1.0);
        let y = d.forward(&x, Phase::Train, &mut rng).unwrap();
        let up = Tensor::filled(&[64], 1.0);
        let dx = d.backward(&up).unwrap();
        assert_eq!(y.data(), dx.data());
    }

    #[test]
    fn same_seed_reproduces_mask() {
        let mut d = Dropout::<f64>::new("d", 0.3).unwrap();
        let x = Tensor::filled(&[128], 1.0);
        let a = d.forward(&x, Phase::Train, &mut Rng::new(42)).unwrap();
        let b = d.forward(&x, Phase::Train, &mut Rng::new(42)).unwrap();
        assert!(a.bits_eq(&b));
    }
}
