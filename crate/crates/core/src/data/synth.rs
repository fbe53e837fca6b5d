//! Synthetic dataset generator with recoverable per-label signatures.
//!
//! Every label owns a signature in all four modalities: a sinusoid at a
//! label-specific integer frequency in one IMU channel (acc and gyro use
//! different channels), a constant offset over a label-specific
//! (coefficient, frame-window) cell of the MFCC map, and one dedicated
//! phone-state bit. Positive labels add their signatures on top of i.i.d.
//! Gaussian noise; ps bits are flipped with a noise-scaled probability.
//!
//! The integer frequencies are orthogonal over the full window and the MFCC
//! cells are disjoint, so at noise 0 a per-label matched filter recovers the
//! labels exactly — [`matched_filter`] is that oracle, and the test suite
//! uses it to establish separability before any model training is trusted.

use super::store::write_instance;
use super::{
    DataError, Dataset, DatasetHeader, Instance, DATASET_FORMAT_VERSION, IMU_CH, IMU_LEN,
    MFCC_CH, MFCC_LEN,
};
use crate::tensor::{Rng, Tensor};
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

/// Signature amplitude. Noise is specified relative to this.
const SIG_AMP: f64 = 1.0;

/// Highest label count the signature scheme can plant: IMU frequencies must
/// stay below the 400-cycle alias ceiling for an 800-sample window.
pub const MAX_SYNTH_LABELS: usize = 1188;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_instances: usize,
    pub n_labels: usize,
    /// Probability that any one label entry is masked missing.
    pub missing_rate: f64,
    /// Per-label Bernoulli rate for the (pre-masking) ground truth.
    pub positive_rates: Vec<f64>,
    /// Gaussian noise scale relative to the signature amplitude; also sets
    /// the ps bit-flip rate at `0.2 * noise` (capped at 0.4).
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(
        n_users: usize,
        n_instances: usize,
        n_labels: usize,
        missing_rate: f64,
        seed: u64,
    ) -> Self {
        SynthSpec {
            n_users,
            n_instances,
            n_labels,
            missing_rate,
            positive_rates: vec![0.3; n_labels],
            noise: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |what: String| Err(DataError::Format(format!("synth spec: {what}")));
        if self.n_users == 0 || self.n_instances == 0 {
            return bad("n_users and n_instances must be positive".into());
        }
        if self.n_labels == 0 || self.n_labels > MAX_SYNTH_LABELS {
            return bad(format!(
                "n_labels {} outside 1..={MAX_SYNTH_LABELS}",
                self.n_labels
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate {} outside [0, 1)", self.missing_rate));
        }
        if self.positive_rates.len() != self.n_labels {
            return bad(format!(
                "{} positive rates for {} labels",
                self.positive_rates.len(),
                self.n_labels
            ));
        }
        if let Some(r) = self
            .positive_rates
            .iter()
            .find(|r| !r.is_finite() || !(0.0..=1.0).contains(*r))
        {
            return bad(format!("positive rate {r} outside [0, 1]"));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return bad(format!("noise {} must be finite and >= 0", self.noise));
        }
        Ok(())
    }

    /// Header of the dataset this spec produces. The ps vector carries one
    /// bit per label.
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            n_labels: self.n_labels,
            ps_width: self.n_labels,
            label_names: (0..self.n_labels).map(|j| format!("label_{j:04}")).collect(),
        }
    }

    fn ps_flip(&self) -> f64 {
        (0.2 * self.noise).min(0.4)
    }
}

/// Label `j`'s accelerometer signature: (channel, integer frequency).
fn acc_sig(j: usize) -> (usize, f64) {
    (j % IMU_CH, (3 + j / IMU_CH) as f64)
}

/// Gyroscope signature: shifted channel, same frequency family. Distinct
/// frequencies within a channel are what the matched filter relies on.
fn gyro_sig(j: usize) -> (usize, f64) {
    ((j + 1) % IMU_CH, (3 + j / IMU_CH) as f64)
}

/// MFCC signature: one coefficient and a frame window, disjoint across
/// labels (window count grows as labels wrap past the 13 coefficients).
fn mfcc_cell(j: usize, n_labels: usize) -> (usize, Range<usize>) {
    let windows = n_labels.div_ceil(MFCC_CH);
    let width = MFCC_LEN / windows;
    let w = j / MFCC_CH;
    (j % MFCC_CH, w * width..(w + 1) * width)
}

fn sin_basis(freq: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| (2.0 * PI * freq * t as f64 / len as f64).sin())
        .collect()
}

fn synth_instance(spec: &SynthSpec, i: usize) -> Instance {
    let c = spec.n_labels;
    let mut rng = Rng::stream(spec.seed, 10_000 + i as u64);
    let truth: Vec<bool> = (0..c)
        .map(|j| rng.next_f64() < spec.positive_rates[j])
        .collect();
    let labels: Vec<Option<u8>> = truth
        .iter()
        .map(|&y| {
            if spec.missing_rate > 0.0 && rng.next_f64() < spec.missing_rate {
                None
            } else {
                Some(u8::from(y))
            }
        })
        .collect();

    let mut acc = vec![0.0f64; IMU_LEN * IMU_CH];
    let mut gyro = vec![0.0f64; IMU_LEN * IMU_CH];
    let mut mfcc = vec![0.0f64; MFCC_LEN * MFCC_CH];
    if spec.noise > 0.0 {
        for v in acc.iter_mut().chain(gyro.iter_mut()).chain(mfcc.iter_mut()) {
            *v = spec.noise * rng.gaussian();
        }
    }
    for j in 0..c {
        if !truth[j] {
            continue;
        }
        let (ch, f) = acc_sig(j);
        for (t, s) in sin_basis(f, IMU_LEN).into_iter().enumerate() {
            acc[t * IMU_CH + ch] += SIG_AMP * s;
        }
        let (ch, f) = gyro_sig(j);
        for (t, s) in sin_basis(f, IMU_LEN).into_iter().enumerate() {
            gyro[t * IMU_CH + ch] += SIG_AMP * s;
        }
        let (ch, frames) = mfcc_cell(j, c);
        for t in frames {
            mfcc[t * MFCC_CH + ch] += SIG_AMP;
        }
    }

    let mut ps = vec![0.0f32; c];
    for (j, &y) in truth.iter().enumerate() {
        ps[j] = f32::from(u8::from(y));
    }
    let flip = spec.ps_flip();
    if flip > 0.0 {
        for b in ps.iter_mut() {
            if rng.next_f64() < flip {
                *b = 1.0 - *b;
            }
        }
    }

    let cast = |v: Vec<f64>, shape: &[usize]| {
        Tensor::from_vec(shape, v.into_iter().map(|x| x as f32).collect())
            .expect("synth window shape")
    };
    Instance {
        id: format!("i{i:06}"),
        user: format!("u{:04}", i % spec.n_users),
        acc: cast(acc, &[IMU_LEN, IMU_CH]),
        gyro: cast(gyro, &[IMU_LEN, IMU_CH]),
        mfcc: cast(mfcc, &[MFCC_LEN, MFCC_CH]),
        ps: Tensor::from_vec(&[c], ps).expect("ps shape"),
        labels,
    }
}

/// Generates the dataset in memory.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut ds = Dataset::new(spec.header())?;
    for i in 0..spec.n_instances {
        ds.push(synth_instance(spec, i))?;
    }
    Ok(ds)
}

/// Generates the dataset straight to disk, one instance at a time, so large
/// runs never hold more than one instance in memory. Byte-identical to
/// saving [`synth_dataset`]'s output.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<DatasetHeader, DataError> {
    spec.validate()?;
    let header = spec.header();
    header.validate()?;
    fs::create_dir_all(dir.join("blobs"))?;
    fs::write(
        dir.join("dataset.json"),
        serde_json::to_string_pretty(&header)? + "\n",
    )?;
    let mut lines = BufWriter::new(File::create(dir.join("instances.jsonl"))?);
    for i in 0..spec.n_instances {
        let inst = synth_instance(spec, i);
        inst.validate(&header)?;
        let rec = write_instance(dir, &inst)?;
        writeln!(lines, "{}", serde_json::to_string(&rec)?)?;
    }
    lines.flush()?;
    Ok(header)
}

/// Per-label signature scores in [0, 1]: the mean of the four per-modality
/// correlations, normalized by the planted amplitude. Thresholding at 0.5
/// recovers noise-free labels exactly. Requires a dataset whose ps width
/// matches the label count (i.e. one produced by this generator's schema).
pub fn matched_filter(ds: &Dataset) -> Result<Tensor<f64>, DataError> {
    let c = ds.header.n_labels;
    if ds.header.ps_width != c {
        return Err(DataError::Format(format!(
            "matched filter needs ps_width == n_labels, got {} != {c}",
            ds.header.ps_width
        )));
    }
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let mut out = Tensor::<f64>::zeros(&[ds.len(), c]);
    for j in 0..c {
        let (ach, af) = acc_sig(j);
        let (gch, gf) = gyro_sig(j);
        let abasis = sin_basis(af, IMU_LEN);
        let gbasis = sin_basis(gf, IMU_LEN);
        let (mch, frames) = mfcc_cell(j, c);
        let cell = frames.len() as f64;
        for (i, inst) in ds.instances.iter().enumerate() {
            let mut ca = 0.0;
            let mut cg = 0.0;
            for t in 0..IMU_LEN {
                ca += f64::from(inst.acc.get2(t, ach)) * abasis[t];
                cg += f64::from(inst.gyro.get2(t, gch)) * gbasis[t];
            }
            ca *= 2.0 / IMU_LEN as f64;
            cg *= 2.0 / IMU_LEN as f64;
            let cm = frames
                .clone()
                .map(|t| f64::from(inst.mfcc.get2(t, mch)))
                .sum::<f64>()
                / cell;
            let cp = f64::from(inst.ps.data()[j]);
            let score = ((ca + cg + cm + cp) / (4.0 * SIG_AMP)).clamp(0.0, 1.0);
            out.set2(i, j, score);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_stats, load_dataset, read_records, save_dataset};
    use crate::metrics::{balanced_accuracy, confusion};
    use std::path::PathBuf;

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::new(4, 10, 6, 0.1, 0).validate().is_ok());
        assert!(SynthSpec::new(0, 10, 6, 0.1, 0).validate().is_err());
        assert!(SynthSpec::new(4, 10, 6, 1.0, 0).validate().is_err());
        assert!(SynthSpec::new(4, 10, 0, 0.1, 0).validate().is_err());
        let mut s = SynthSpec::new(4, 10, 6, 0.1, 0);
        s.positive_rates[2] = 1.5;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::new(4, 10, 6, 0.1, 0);
        s.positive_rates.pop();
        assert!(s.validate().is_err());
        let mut s = SynthSpec::new(4, 10, 6, 0.1, 0);
        s.noise = -0.1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn structure_and_user_assignment() {
        let spec = SynthSpec::new(3, 10, 5, 0.2, 7);
        let ds = synth_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.header.ps_width, 5);
        assert_eq!(ds.header.label_names[4], "label_0004");
        assert_eq!(ds.users(), vec!["u0000", "u0001", "u0002"]);
        // Round-robin: 10 instances over 3 users -> 4/3/3.
        let counts: Vec<usize> = ds
            .users()
            .iter()
            .map(|u| ds.indices_for_users(std::slice::from_ref(u)).len())
            .collect();
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn missing_rate_zero_means_no_nulls() {
        let ds = synth_dataset(&SynthSpec::new(2, 30, 4, 0.0, 1)).unwrap();
        assert!(ds
            .instances
            .iter()
            .all(|i| i.labels.iter().all(|l| l.is_some())));
        let ds = synth_dataset(&SynthSpec::new(2, 30, 4, 0.5, 1)).unwrap();
        let nulls = ds
            .instances
            .iter()
            .flat_map(|i| &i.labels)
            .filter(|l| l.is_none())
            .count();
        assert!(nulls > 0);
    }

    #[test]
    fn generate_is_byte_identical_and_matches_in_memory_save() {
        let spec = SynthSpec::new(3, 6, 4, 0.1, 11);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        synth_generate(&spec, a.path()).unwrap();
        synth_generate(&spec, b.path()).unwrap();
        save_dataset(c.path(), &synth_dataset(&spec).unwrap()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        assert_eq!(dir_bytes(a.path()), dir_bytes(c.path()));
    }

    #[test]
    fn generated_directory_loads_clean() {
        let spec = SynthSpec::new(2, 5, 3, 0.1, 13);
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&spec, dir.path()).unwrap();
        let (ds, discarded) = load_dataset(dir.path()).unwrap();
        assert!(discarded.is_empty());
        assert_eq!(ds.len(), 5);
        let mem = synth_dataset(&spec).unwrap();
        for (a, b) in ds.instances.iter().zip(&mem.instances) {
            assert!(a.acc.bits_eq(&b.acc));
            assert!(a.ps.bits_eq(&b.ps));
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn realized_rates_track_spec_within_two_percent() {
        // 4000 instances x 8 labels = 3.2e4 entries, ~2.9e4 after masking.
        let mut spec = SynthSpec::new(10, 4000, 8, 0.1, 33);
        spec.noise = 0.0;
        spec.positive_rates = vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.95];
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&spec, dir.path()).unwrap();
        let (_, records) = read_records(dir.path()).unwrap();
        let stats = label_stats(records.iter().map(|r| &r.labels), 8).unwrap();
        for (j, &(present, positive)) in stats.iter().enumerate() {
            assert!(present as f64 >= 0.8 * 4000.0, "label {j}: {present} present");
            let realized = positive as f64 / present as f64;
            assert!(
                (realized - spec.positive_rates[j]).abs() < 0.02,
                "label {j}: realized {realized:.4} vs spec {}",
                spec.positive_rates[j]
            );
        }
    }

    #[test]
    fn noise_free_matched_filter_is_perfect() {
        // 16 labels crosses the 13-coefficient boundary, so two labels share
        // an MFCC coefficient and an IMU channel/frequency reuse kicks in.
        let mut spec = SynthSpec::new(4, 120, 16, 0.1, 21);
        spec.noise = 0.0;
        let ds = synth_dataset(&spec).unwrap();
        let scores = matched_filter(&ds).unwrap();
        let labels = ds.label_matrix(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
        let counts = confusion(&scores, &labels, 0.5).unwrap();
        let per_label = balanced_accuracy(&counts);
        for (j, score) in per_label.iter().enumerate() {
            assert_eq!(
                score.ba,
                Some(1.0),
                "label {j}: {:?} (n_present {})",
                score,
                score.n_present
            );
        }
    }

    #[test]
    fn noisy_matched_filter_still_separates() {
        let spec = SynthSpec::new(4, 80, 6, 0.0, 5); // default noise 0.25
        let ds = synth_dataset(&spec).unwrap();
        let scores = matched_filter(&ds).unwrap();
        let labels = ds.label_matrix(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
        let counts = confusion(&scores, &labels, 0.5).unwrap();
        for s in balanced_accuracy(&counts) {
            let ba = s.ba.expect("both classes present");
            assert!(ba > 0.9, "ba {ba}");
        }
    }

    #[test]
    fn mfcc_cells_are_disjoint() {
        for c in [1, 5, 13, 16, 26, 51, 100] {
            let mut seen = vec![false; MFCC_LEN * MFCC_CH];
            for j in 0..c {
                let (ch, frames) = mfcc_cell(j, c);
                assert!(!frames.is_empty());
                assert!(frames.end <= MFCC_LEN);
                for t in frames {
                    let k = t * MFCC_CH + ch;
                    assert!(!seen[k], "labels {c}: cell overlap at ({t}, {ch})");
                    seen[k] = true;
                }
            }
        }
    }

    #[test]
    fn imu_frequencies_distinct_within_channel() {
        let c = MAX_SYNTH_LABELS;
        let mut seen = std::collections::BTreeSet::new();
        for j in 0..c {
            let (ch, f) = acc_sig(j);
            assert!(f < (IMU_LEN / 2) as f64, "label {j} frequency {f} aliases");
            assert!(seen.insert((ch, f as u64)), "label {j} repeats ({ch}, {f})");
        }
    }
}
