//! Checkpoint directory layout: `manifest.json` describing the config,
//! seed, training step, and every parameter's name/shape, plus one binary
//! blob per parameter under `blobs/`. Loading rebuilds the model from the
//! manifest config and overwrites every parameter from its blob, so a
//! round trip reproduces inference outputs bit for bit.

use super::{Model, ModelConfig, ModelError};
use crate::tensor::{blob_read, blob_write, Dtype, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    }
}

fn blob_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("blobs").join(format!("{name}.bin"))
}

pub fn checkpoint_save<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir.join("blobs"))?;
    let params = model.params();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config().clone(),
        seed: model.seed(),
        step: model.step(),
        dtype: dtype_name(T::DTYPE).to_string(),
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let file = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    for p in params {
        let file = File::create(blob_file(dir, &p.name))?;
        let mut sink = BufWriter::new(file);
        blob_write(&p.value, &mut sink).map_err(|e| {
            ModelError::Checkpoint(format!("writing blob for parameter {}: {e}", p.name))
        })?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ModelError> {
    let file = File::open(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unknown checkpoint format version {} (expected {})",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    Ok(manifest)
}

pub fn checkpoint_load<T: Scalar>(dir: &Path) -> Result<Model<T>, ModelError> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != dtype_name(T::DTYPE) {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            manifest.dtype,
            dtype_name(T::DTYPE)
        )));
    }
    let mut model: Model<T> = Model::build(&manifest.config, manifest.seed)?;
    model.set_step(manifest.step);

    let mut listed = BTreeSet::new();
    for entry in &manifest.params {
        if !listed.insert(entry.name.as_str()) {
            return Err(ModelError::Checkpoint(format!(
                "parameter {} listed twice in manifest",
                entry.name
            )));
        }
    }
    let expected: BTreeSet<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in &expected {
        if !listed.contains(name.as_str()) {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} missing from manifest"
            )));
        }
    }
    for entry in &manifest.params {
        if !expected.contains(&entry.name) {
            return Err(ModelError::Checkpoint(format!(
                "manifest lists unknown parameter {}",
                entry.name
            )));
        }
    }

    for entry in &manifest.params {
        let path = blob_file(dir, &entry.name);
        let file = File::open(&path).map_err(|e| {
            ModelError::Checkpoint(format!("opening blob for parameter {}: {e}", entry.name))
        })?;
        let tensor = blob_read::<T, _>(&mut BufReader::new(file)).map_err(|e| {
            ModelError::Checkpoint(format!("reading blob for parameter {}: {e}", entry.name))
        })?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(ModelError::Checkpoint(format!(
                "parameter {}: manifest shape {:?} does not match blob shape {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let mut found = false;
        for p in model.params_mut() {
            if p.name == entry.name {
                if p.value.shape() != tensor.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {}: blob shape {:?} does not match model shape {:?}",
                        entry.name,
                        tensor.shape(),
                        p.value.shape()
                    )));
                }
                p.value = tensor;
                found = true;
                break;
            }
        }
        debug_assert!(found, "coverage checked above");
    }
    Ok(model)
}
