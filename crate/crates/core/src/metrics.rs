//! Per-label sensitivity / specificity / balanced accuracy over partially
//! labeled data, with fold-level and macro aggregation.
//!
//! Degenerate labels (only one class present in a fold) yield undefined
//! components; they are reported as absent and excluded from macro averages,
//! and the exclusion count is carried on every report.

use crate::objective::LabelMatrix;
use crate::tensor::{Scalar, Tensor};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("no fold reports to aggregate")]
    Empty,
}

/// Confusion counts for one label, over present entries only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub tpc: usize,
    pub fpc: usize,
    pub tnc: usize,
    pub fnc: usize,
}

impl LabelCounts {
    pub fn n_present(&self) -> usize {
        self.tpc + self.fpc + self.tnc + self.fnc
    }
}

/// Per-label confusion counts for a prediction/label table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub per_label: Vec<LabelCounts>,
}

/// Thresholded confusion counts: prediction >= threshold counts as positive,
/// missing entries are excluded from every cell.
pub fn confusion<T: Scalar>(
    predictions: &Tensor<T>,
    labels: &LabelMatrix,
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let (n, c) = (labels.n_rows(), labels.n_labels());
    if predictions.rank() != 2 || predictions.shape() != [n, c] {
        return Err(MetricsError::Shape {
            op: "confusion",
            expected: format!("[{n}, {c}]"),
            got: format!("{:?}", predictions.shape()),
        });
    }
    let mut per_label = vec![LabelCounts::default(); c];
    for i in 0..n {
        for j in 0..c {
            let Some(y) = labels.get(i, j) else { continue };
            let predicted_positive = predictions.get2(i, j).to_f64() >= threshold;
            let cell = &mut per_label[j];
            match (y == 1.0, predicted_positive) {
                (true, true) => cell.tpc += 1,
                (true, false) => cell.fnc += 1,
                (false, true) => cell.fpc += 1,
                (false, false) => cell.tnc += 1,
            }
        }
    }
    Ok(ConfusionCounts { per_label })
}

/// Scores for one label; components are `None` when undefined for the fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelScore {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ba: Option<f64>,
    pub n_present: usize,
}

/// sens = tp/(tp+fn), spec = tn/(tn+fp), ba = (sens+spec)/2; any component
/// whose denominator is zero is undefined, not an error.
pub fn balanced_accuracy(counts: &ConfusionCounts) -> Vec<LabelScore> {
    counts
        .per_label
        .iter()
        .map(|lc| {
            let sensitivity = (lc.tpc + lc.fnc > 0)
                .then(|| lc.tpc as f64 / (lc.tpc + lc.fnc) as f64);
            let specificity = (lc.tnc + lc.fpc > 0)
                .then(|| lc.tnc as f64 / (lc.tnc + lc.fpc) as f64);
            let ba = match (sensitivity, specificity) {
                (Some(se), Some(sp)) => Some((se + sp) / 2.0),
                _ => None,
            };
            LabelScore {
                sensitivity,
                specificity,
                ba,
                n_present: lc.n_present(),
            }
        })
        .collect()
}

/// One evaluation fold: per-label scores plus macro averages over the labels
/// where each component is defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub per_label: Vec<LabelScore>,
    pub macro_sensitivity: Option<f64>,
    pub macro_specificity: Option<f64>,
    pub macro_ba: Option<f64>,
    /// Labels whose BA was undefined in this fold.
    pub excluded_labels: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

impl FoldReport {
    pub fn from_counts(counts: &ConfusionCounts) -> FoldReport {
        let per_label = balanced_accuracy(counts);
        FoldReport::from_scores(per_label)
    }

    pub fn from_scores(per_label: Vec<LabelScore>) -> FoldReport {
        let macro_sensitivity = mean_defined(per_label.iter().map(|s| s.sensitivity));
        let macro_specificity = mean_defined(per_label.iter().map(|s| s.specificity));
        let macro_ba = mean_defined(per_label.iter().map(|s| s.ba));
        let excluded_labels = per_label.iter().filter(|s| s.ba.is_none()).count();
        FoldReport {
            per_label,
            macro_sensitivity,
            macro_specificity,
            macro_ba,
            excluded_labels,
        }
    }

    /// Flat tabular text: one row per label with the fixed column order
    /// label_id, n_present, sens, spec, ba. Undefined components render "-".
    pub fn to_table(&self) -> String {
        render_table(&self.per_label)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    }
}

fn render_table(scores: &[LabelScore]) -> String {
    let mut out = String::from("label_id\tn_present\tsens\tspec\tba\n");
    for (j, s) in scores.iter().enumerate() {
        out.push_str(&format!(
            "{j}\t{}\t{}\t{}\t{}\n",
            s.n_present,
            fmt_opt(s.sensitivity),
            fmt_opt(s.specificity),
            fmt_opt(s.ba)
        ));
    }
    out
}

/// Aggregate over folds: per label, fold-average each defined component;
/// macro scores are the unweighted means over labels of those fold averages;
/// the across-fold population standard deviation of each fold's macro score
/// is the reported dispersion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n_folds: usize,
    pub per_label: Vec<LabelScore>,
    pub macro_sensitivity: Option<f64>,
    pub macro_specificity: Option<f64>,
    pub macro_ba: Option<f64>,
    pub sd_sensitivity: Option<f64>,
    pub sd_specificity: Option<f64>,
    pub sd_ba: Option<f64>,
    pub excluded_per_fold: Vec<usize>,
}

fn population_sd(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

pub fn aggregate(reports: &[FoldReport]) -> Result<Summary, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    let c = first.per_label.len();
    for r in reports {
        if r.per_label.len() != c {
            return Err(MetricsError::Shape {
                op: "aggregate",
                expected: format!("{c} labels"),
                got: format!("{}", r.per_label.len()),
            });
        }
    }
    let per_label: Vec<LabelScore> = (0..c)
        .map(|j| {
            let sens = mean_defined(reports.iter().map(|r| r.per_label[j].sensitivity));
            let spec = mean_defined(reports.iter().map(|r| r.per_label[j].specificity));
            let ba = mean_defined(reports.iter().map(|r| r.per_label[j].ba));
            let n_present = reports.iter().map(|r| r.per_label[j].n_present).sum();
            LabelScore {
                sensitivity: sens,
                specificity: spec,
                ba,
                n_present,
            }
        })
        .collect();
    let fold_macros = |f: fn(&FoldReport) -> Option<f64>| -> Vec<f64> {
        reports.iter().filter_map(f).collect()
    };
    Ok(Summary {
        n_folds: reports.len(),
        macro_sensitivity: mean_defined(per_label.iter().map(|s| s.sensitivity)),
        macro_specificity: mean_defined(per_label.iter().map(|s| s.specificity)),
        macro_ba: mean_defined(per_label.iter().map(|s| s.ba)),
        sd_sensitivity: population_sd(&fold_macros(|r| r.macro_sensitivity)),
        sd_specificity: population_sd(&fold_macros(|r| r.macro_specificity)),
        sd_ba: population_sd(&fold_macros(|r| r.macro_ba)),
        excluded_per_fold: reports.iter().map(|r| r.excluded_labels).collect(),
        per_label,
    })
}

impl Summary {
    pub fn to_table(&self) -> String {
        render_table(&self.per_label)
    }

    /// One-line headline in the "0.750 (+-0.012)" presentation.
    pub fn headline(&self) -> String {
        let fmt_pair = |m: Option<f64>, sd: Option<f64>| match (m, sd) {
            (Some(m), Some(sd)) => format!("{m:.3} (+-{sd:.3})"),
            (Some(m), None) => format!("{m:.3}"),
            _ => "-".to_string(),
        };
        format!(
            "ba={} sens={} spec={}",
            fmt_pair(self.macro_ba, self.sd_ba),
            fmt_pair(self.macro_sensitivity, self.sd_sensitivity),
            fmt_pair(self.macro_specificity, self.sd_specificity)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn labels_from(entries: &[&[Option<u8>]]) -> LabelMatrix {
        let rows: Vec<Vec<Option<u8>>> = entries.iter().map(|r| r.to_vec()).collect();
        LabelMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn perfect_predictions_have_no_errors() {
        let labels = labels_from(&[&[Some(1), Some(0)], &[Some(0), Some(1)]]);
        let pred = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let counts = confusion(&pred, &labels, 0.5).unwrap();
        for lc in &counts.per_label {
            assert_eq!(lc.fpc, 0);
            assert_eq!(lc.fnc, 0);
        }
        let scores = balanced_accuracy(&counts);
        assert_eq!(scores[0].ba, Some(1.0));
        assert_eq!(scores[1].ba, Some(1.0));
    }

    #[test]
    fn all_zero_predictions_have_no_positives() {
        let labels = labels_from(&[&[Some(1)], &[Some(0)]]);
        let pred = Tensor::<f64>::zeros(&[2, 1]);
        let counts = confusion(&pred, &labels, 0.5).unwrap();
        assert_eq!(counts.per_label[0].tpc, 0);
        assert_eq!(counts.per_label[0].fpc, 0);
    }

    #[test]
    fn four_entry_hand_case() {
        let labels = labels_from(&[&[Some(1)], &[Some(0)], &[None], &[Some(1)]]);
        let pred = Tensor::from_vec(&[4, 1], vec![0.9f64, 0.6, 0.9, 0.2]).unwrap();
        let counts = confusion(&pred, &labels, 0.5).unwrap();
        let lc = counts.per_label[0];
        assert_eq!((lc.tpc, lc.fpc, lc.tnc, lc.fnc), (1, 1, 0, 1));
    }

    #[test]
    fn constant_positive_classifier_is_chance_level() {
        let labels = labels_from(&[&[Some(1)], &[Some(0)], &[Some(0)], &[Some(1)]]);
        let pred = Tensor::<f64>::filled(&[4, 1], 0.99);
        let scores = balanced_accuracy(&confusion(&pred, &labels, 0.5).unwrap());
        assert_eq!(scores[0].sensitivity, Some(1.0));
        assert_eq!(scores[0].specificity, Some(0.0));
        assert_eq!(scores[0].ba, Some(0.5));
    }

    #[test]
    fn counts_arithmetic_case() {
        let counts = ConfusionCounts {
            per_label: vec![LabelCounts {
                tpc: 3,
                fnc: 1,
                tnc: 8,
                fpc: 8,
            }],
        };
        let s = balanced_accuracy(&counts)[0];
        assert_eq!(s.sensitivity, Some(0.75));
        assert_eq!(s.specificity, Some(0.5));
        assert_eq!(s.ba, Some(0.625));
    }

    #[test]
    fn degenerate_label_reported_absent() {
        let labels = labels_from(&[&[Some(1)], &[Some(1)]]);
        let pred = Tensor::<f64>::filled(&[2, 1], 0.9);
        let report = FoldReport::from_counts(&confusion(&pred, &labels, 0.5).unwrap());
        assert_eq!(report.per_label[0].sensitivity, Some(1.0));
        assert_eq!(report.per_label[0].specificity, None);
        assert_eq!(report.per_label[0].ba, None);
        assert_eq!(report.excluded_labels, 1);
        assert_eq!(report.macro_ba, None);
    }

    #[test]
    fn identical_folds_aggregate_to_single_fold() {
        let labels = labels_from(&[&[Some(1), Some(0)], &[Some(0), Some(1)]]);
        let pred = Tensor::from_vec(&[2, 2], vec![0.9f64, 0.4, 0.2, 0.8]).unwrap();
        let fold = FoldReport::from_counts(&confusion(&pred, &labels, 0.5).unwrap());
        let summary = aggregate(&[fold.clone(), fold.clone(), fold.clone()]).unwrap();
        assert_eq!(summary.macro_ba, fold.macro_ba);
        assert_eq!(summary.sd_ba, Some(0.0));
    }

    #[test]
    fn two_fold_dispersion_hand_case() {
        let make = |ba: f64| {
            FoldReport::from_scores(vec![LabelScore {
                sensitivity: Some(ba),
                specificity: Some(ba),
                ba: Some(ba),
                n_present: 10,
            }])
        };
        let summary = aggregate(&[make(0.7), make(0.8)]).unwrap();
        assert!((summary.macro_ba.unwrap() - 0.75).abs() < 1e-15);
        assert!((summary.sd_ba.unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn table_format_is_stable() {
        let labels = labels_from(&[&[Some(1), Some(1)], &[Some(0), Some(1)]]);
        let pred = Tensor::from_vec(&[2, 2], vec![0.9f64, 0.9, 0.1, 0.9]).unwrap();
        let report = FoldReport::from_counts(&confusion(&pred, &labels, 0.5).unwrap());
        let table = report.to_table();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), "label_id\tn_present\tsens\tspec\tba");
        assert_eq!(lines.next().unwrap(), "0\t2\t1.000000\t1.000000\t1.000000");
        assert_eq!(lines.next().unwrap(), "1\t2\t1.000000\t-\t-");
    }

    #[test]
    fn bad_threshold_rejected() {
        let labels = labels_from(&[&[Some(1)]]);
        let pred = Tensor::<f64>::filled(&[1, 1], 0.5);
        assert!(matches!(
            confusion(&pred, &labels, 0.0),
            Err(MetricsError::BadThreshold(_))
        ));
        assert!(matches!(
            confusion(&pred, &labels, 1.0),
            Err(MetricsError::BadThreshold(_))
        ));
    }

    #[test]
    fn all_missing_instances_change_nothing() {
        let mut rng = Rng::new(4);
        let (n, c) = (20, 5);
        let mut labels = LabelMatrix::new(n + 7, c);
        let mut pred = Tensor::<f64>::zeros(&[n + 7, c]);
        for i in 0..n {
            for j in 0..c {
                if rng.next_f64() < 0.8 {
                    labels.set(i, j, Some(rng.next_f64() < 0.5));
                }
                pred.set2(i, j, rng.next_f64());
            }
        }
        // Rows n.. stay all-missing but carry arbitrary predictions.
        for i in n..n + 7 {
            for j in 0..c {
                pred.set2(i, j, rng.next_f64());
            }
        }
        let full = confusion(&pred, &labels, 0.5).unwrap();

        let trimmed_labels = labels.select_rows(&(0..n).collect::<Vec<_>>());
        let mut trimmed_pred = Tensor::<f64>::zeros(&[n, c]);
        for i in 0..n {
            for j in 0..c {
                trimmed_pred.set2(i, j, pred.get2(i, j));
            }
        }
        let trimmed = confusion(&trimmed_pred, &trimmed_labels, 0.5).unwrap();
        assert_eq!(full, trimmed);
    }

    #[test]
    fn brute_force_oracle_small_tables() {
        let mut rng = Rng::new(2024);
        for _ in 0..500 {
            let n = 1 + rng.index(12);
            let c = 1 + rng.index(6);
            let mut labels = LabelMatrix::new(n, c);
            let mut pred = Tensor::<f64>::zeros(&[n, c]);
            for i in 0..n {
                for j in 0..c {
                    match rng.index(3) {
                        0 => labels.set(i, j, Some(true)),
                        1 => labels.set(i, j, Some(false)),
                        _ => {}
                    }
                    pred.set2(i, j, rng.next_f64());
                }
            }
            let scores = balanced_accuracy(&confusion(&pred, &labels, 0.5).unwrap());
            // Independent recount straight from the raw pairs.
            for j in 0..c {
                let (mut tp, mut fp, mut tn, mut fnn) = (0u32, 0u32, 0u32, 0u32);
                for i in 0..n {
                    if let Some(y) = labels.get(i, j) {
                        let pos = pred.get2(i, j) >= 0.5;
                        match (y == 1.0, pos) {
                            (true, true) => tp += 1,
                            (true, false) => fnn += 1,
                            (false, true) => fp += 1,
                            (false, false) => tn += 1,
                        }
                    }
                }
                let sens = (tp + fnn > 0).then(|| tp as f64 / (tp + fnn) as f64);
                let spec = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
                let ba = match (sens, spec) {
                    (Some(a), Some(b)) => Some((a + b) / 2.0),
                    _ => None,
                };
                assert_eq!(scores[j].sensitivity, sens);
                assert_eq!(scores[j].specificity, spec);
                assert_eq!(scores[j].ba, ba);
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_monotonicity(seed in 0u64..2_000) {
            let mut rng = Rng::new(seed);
            let (n, c) = (3 + rng.index(20), 1 + rng.index(4));
            let mut labels = LabelMatrix::new(n, c);
            let mut pred = Tensor::<f64>::zeros(&[n, c]);
            for i in 0..n {
                for j in 0..c {
                    if rng.next_f64() < 0.85 {
                        labels.set(i, j, Some(rng.next_f64() < 0.4));
                    }
                    pred.set2(i, j, rng.next_f64());
                }
            }
            let lo = 0.2 + 0.3 * rng.next_f64();
            let hi = lo + (0.99 - lo) * rng.next_f64();
            let s_lo = balanced_accuracy(&confusion(&pred, &labels, lo).unwrap());
            let s_hi = balanced_accuracy(&confusion(&pred, &labels, hi).unwrap());
            for j in 0..c {
                if let (Some(a), Some(b)) = (s_lo[j].sensitivity, s_hi[j].sensitivity) {
                    prop_assert!(b <= a + 1e-15, "sens rose with threshold");
                }
                if let (Some(a), Some(b)) = (s_lo[j].specificity, s_hi[j].specificity) {
                    prop_assert!(b >= a - 1e-15, "spec fell with threshold");
                }
            }
        }

        #[test]
        fn label_permutation_equivariance(seed in 0u64..1_000) {
            let mut rng = Rng::new(seed.wrapping_mul(7919));
            let (n, c) = (4 + rng.index(10), 2 + rng.index(5));
            let mut labels = LabelMatrix::new(n, c);
            let mut pred = Tensor::<f64>::zeros(&[n, c]);
            for i in 0..n {
                for j in 0..c {
                    if rng.next_f64() < 0.8 {
                        labels.set(i, j, Some(rng.next_f64() < 0.5));
                    }
                    pred.set2(i, j, rng.next_f64());
                }
            }
            let mut perm: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut perm);
            let mut plabels = LabelMatrix::new(n, c);
            let mut ppred = Tensor::<f64>::zeros(&[n, c]);
            for i in 0..n {
                for (dst, &src) in perm.iter().enumerate() {
                    plabels.set(i, dst, labels.get(i, src).map(|v| v == 1.0));
                    ppred.set2(i, dst, pred.get2(i, src));
                }
            }
            let base = FoldReport::from_counts(&confusion(&pred, &labels, 0.5).unwrap());
            let permuted = FoldReport::from_counts(&confusion(&ppred, &plabels, 0.5).unwrap());
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(permuted.per_label[dst], base.per_label[src]);
            }
            match (base.macro_ba, permuted.macro_ba) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
