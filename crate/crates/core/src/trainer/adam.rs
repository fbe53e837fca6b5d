//! Bias-corrected Adam with 64-bit moment accumulators.
//!
//! Moments are kept at f64 regardless of the parameter dtype so that the
//! update trajectory is identical whether or not it was interrupted by a
//! checkpoint save/load cycle, and so f32 models don't lose the small
//! second-moment tail to rounding.

use super::TrainError;
use crate::layers::Param;
use crate::tensor::{blob_read, blob_write, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(TrainError::Plan(format!("bad Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state: one (m, v) pair per parameter, in the model's parameter
/// traversal order, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    hyper: AdamHyper,
    t: u64,
    names: Vec<String>,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimManifest {
    format_version: u32,
    t: u64,
    hyper: AdamHyper,
    params: Vec<String>,
}

const OPTIM_FORMAT_VERSION: u32 = 1;

impl Adam {
    pub fn new<T: Scalar>(hyper: AdamHyper, params: &[&Param<T>]) -> Result<Self, TrainError> {
        hyper.validate()?;
        Ok(Adam {
            hyper,
            t: 0,
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    /// One bias-corrected update from the parameters' current gradients.
    /// Rejects non-finite gradients before touching any state, naming the
    /// offending parameter.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) -> Result<(), TrainError> {
        if params.len() != self.names.len() {
            return Err(TrainError::Plan(format!(
                "optimizer holds {} parameters, model has {}",
                self.names.len(),
                params.len()
            )));
        }
        for (k, p) in params.iter().enumerate() {
            if p.name != self.names[k] {
                return Err(TrainError::Plan(format!(
                    "optimizer slot {k} is {}, model has {}",
                    self.names[k], p.name
                )));
            }
            let norm2: f64 = p.grad.data().iter().map(|g| g.to_f64() * g.to_f64()).sum();
            if !norm2.is_finite() {
                return Err(TrainError::NonFiniteGrad {
                    step: self.t,
                    param: p.name.clone(),
                    norm: norm2.sqrt(),
                });
            }
        }
        let t = self.t + 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powf(t as f64);
        let bc2 = 1.0 - beta2.powf(t as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i].to_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                value[i] = T::from_f64(value[i].to_f64() - delta);
            }
        }
        self.t = t;
        Ok(())
    }

    /// Writes `optim.json` plus one f64 blob pair per parameter under
    /// `optim/` in `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir.join("optim"))?;
        let manifest = OptimManifest {
            format_version: OPTIM_FORMAT_VERSION,
            t: self.t,
            hyper: self.hyper,
            params: self.names.clone(),
        };
        fs::write(
            dir.join("optim.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        for (k, name) in self.names.iter().enumerate() {
            for (tag, tensor) in [("m", &self.m[k]), ("v", &self.v[k])] {
                let path = dir.join("optim").join(format!("{name}.{tag}.bin"));
                let mut w = BufWriter::new(File::create(path)?);
                blob_write(tensor, &mut w)?;
                w.flush()?;
            }
        }
        Ok(())
    }

    /// Restores optimizer state saved by [`Adam::save`], validated against
    /// the model's parameter list.
    pub fn load<T: Scalar>(dir: &Path, params: &[&Param<T>]) -> Result<Self, TrainError> {
        let text = fs::read_to_string(dir.join("optim.json"))?;
        let manifest: OptimManifest = serde_json::from_str(&text)?;
        if manifest.format_version != OPTIM_FORMAT_VERSION {
            return Err(TrainError::Plan(format!(
                "optimizer state format_version {} unsupported",
                manifest.format_version
            )));
        }
        manifest.hyper.validate()?;
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        if manifest.params != names {
            return Err(TrainError::Plan(
                "optimizer state parameter list does not match the model".into(),
            ));
        }
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            for (tag, out) in [("m", &mut m), ("v", &mut v)] {
                let path = dir.join("optim").join(format!("{name}.{tag}.bin"));
                let mut r = BufReader::new(File::open(&path)?);
                let tensor: Tensor<f64> = blob_read(&mut r).map_err(|e| {
                    TrainError::Plan(format!("optimizer blob for {name}.{tag}: {e}"))
                })?;
                if tensor.shape() != params[k].value.shape() {
                    return Err(TrainError::Plan(format!(
                        "optimizer moment {name}.{tag} has shape {:?}, parameter is {:?}",
                        tensor.shape(),
                        params[k].value.shape()
                    )));
                }
                out.push(tensor);
            }
        }
        Ok(Adam {
            hyper: manifest.hyper,
            t: manifest.t,
            names,
            m,
            v,
        })
    }
}
