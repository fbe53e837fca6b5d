//! Dataset directory reading and writing.
//!
//! Layout: `dataset.json` (header), `instances.jsonl` (one record per line),
//! `blobs/` (one f32 tensor blob per window, written with the tensor blob
//! format). Writing is deterministic — the same dataset produces the same
//! bytes — and loading preprocesses every record, so directories exported
//! from raw recordings load the same way as generated ones.

use super::preprocess::{preprocess, Prepared, RawInstance};
use super::{DataError, Dataset, DatasetHeader, FileRefs, Instance, InstanceRecord};
use crate::tensor::{blob_read, blob_write, Tensor};
use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// An instance skipped at load time, with the preprocessing reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discarded {
    pub id: String,
    pub reason: String,
}

fn write_blob(dir: &Path, rel: &str, t: &Tensor<f32>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(dir.join(rel))?);
    blob_write(t, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_blob(dir: &Path, id: &str, name: &str, rel: &str) -> Result<Tensor<f32>, DataError> {
    let mut r = BufReader::new(File::open(dir.join(rel)).map_err(|e| DataError::Malformed {
        id: id.to_string(),
        what: format!("{name} blob {rel}: {e}"),
    })?);
    blob_read::<f32, _>(&mut r).map_err(|e| DataError::Malformed {
        id: id.to_string(),
        what: format!("{name} blob {rel}: {e}"),
    })
}

/// Writes `ds` as a dataset directory, creating it if needed. Instance ids
/// must be unique — they name the blob files.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    ds.header.validate()?;
    let mut seen = BTreeSet::new();
    for inst in &ds.instances {
        inst.validate(&ds.header)?;
        if !seen.insert(inst.id.as_str()) {
            return Err(DataError::Format(format!("duplicate instance id {}", inst.id)));
        }
    }
    fs::create_dir_all(dir.join("blobs"))?;
    let header = serde_json::to_string_pretty(&ds.header)?;
    fs::write(dir.join("dataset.json"), header + "\n")?;
    let mut lines = BufWriter::new(File::create(dir.join("instances.jsonl"))?);
    for inst in &ds.instances {
        let rec = write_instance(dir, inst)?;
        writeln!(lines, "{}", serde_json::to_string(&rec)?)?;
    }
    lines.flush()?;
    Ok(())
}

/// Writes one instance's blobs into an already-prepared directory and
/// returns its record. Used by the streaming generator as well as
/// [`save_dataset`].
pub(super) fn write_instance(dir: &Path, inst: &Instance) -> Result<InstanceRecord, DataError> {
    let files = FileRefs {
        acc: format!("blobs/{}.acc.bin", inst.id),
        gyro: format!("blobs/{}.gyro.bin", inst.id),
        mfcc: format!("blobs/{}.mfcc.bin", inst.id),
        ps: format!("blobs/{}.ps.bin", inst.id),
    };
    write_blob(dir, &files.acc, &inst.acc)?;
    write_blob(dir, &files.gyro, &inst.gyro)?;
    write_blob(dir, &files.mfcc, &inst.mfcc)?;
    write_blob(dir, &files.ps, &inst.ps)?;
    Ok(InstanceRecord {
        id: inst.id.clone(),
        user: inst.user.clone(),
        labels: inst.labels.clone(),
        files,
    })
}

/// Reads and validates just the header.
pub fn read_header(dir: &Path) -> Result<DatasetHeader, DataError> {
    let text = fs::read_to_string(dir.join("dataset.json"))?;
    let header: DatasetHeader = serde_json::from_str(&text)?;
    header.validate()?;
    Ok(header)
}

/// Reads the header and all records without touching the blobs — enough for
/// label statistics and fold planning.
pub fn read_records(dir: &Path) -> Result<(DatasetHeader, Vec<InstanceRecord>), DataError> {
    let header = read_header(dir)?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    let file = BufReader::new(File::open(dir.join("instances.jsonl"))?);
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| {
            DataError::Format(format!("instances.jsonl line {}: {e}", lineno + 1))
        })?;
        if rec.labels.len() != header.n_labels {
            return Err(DataError::Malformed {
                id: rec.id,
                what: format!("{} labels, expected {}", rec.labels.len(), header.n_labels),
            });
        }
        if let Some(v) = rec.labels.iter().flatten().find(|&&v| v > 1) {
            return Err(DataError::Malformed {
                id: rec.id,
                what: format!("label value {v}, expected 0/1/null"),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(DataError::Format(format!("duplicate instance id {}", rec.id)));
        }
        records.push(rec);
    }
    Ok((header, records))
}

/// Loads a dataset directory, preprocessing every instance. Instances whose
/// windows fail the length floor come back in the discard list instead of
/// the dataset.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<Discarded>), DataError> {
    let (header, records) = read_records(dir)?;
    let mut ds = Dataset::new(header)?;
    let mut discarded = Vec::new();
    for rec in records {
        let raw = RawInstance {
            acc: read_blob(dir, &rec.id, "acc", &rec.files.acc)?,
            gyro: read_blob(dir, &rec.id, "gyro", &rec.files.gyro)?,
            mfcc: read_blob(dir, &rec.id, "mfcc", &rec.files.mfcc)?,
            ps: read_blob(dir, &rec.id, "ps", &rec.files.ps)?,
            id: rec.id,
            user: rec.user,
            labels: rec.labels,
        };
        match preprocess(raw)? {
            Prepared::Ready(inst) => ds.push(inst)?,
            Prepared::Discard { id, reason } => discarded.push(Discarded { id, reason }),
        }
    }
    Ok((ds, discarded))
}
