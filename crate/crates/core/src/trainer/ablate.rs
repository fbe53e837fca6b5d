//! Grid ablations: the cross product of fusion modes, conv kinds, modality
//! subsets, instance weighting, and regularization, each cell one full
//! cross-validation run under identical seeds, so cells differ only in the
//! knob being ablated.

use serde::Deserialize;

use super::{run_cv, CvOutcome, TrainError, TrainPlan};
use crate::data::Dataset;
use crate::model::{ConvChoice, Fusion, Modality, ModelConfig};
use crate::tensor::Scalar;

fn default_fusions() -> Vec<Fusion> {
    vec![Fusion::Gmp]
}
fn default_conv_kinds() -> Vec<ConvChoice> {
    vec![ConvChoice::Dps]
}
fn default_modality_sets() -> Vec<Vec<Modality>> {
    vec![Modality::ALL.to_vec()]
}
fn default_flags() -> Vec<bool> {
    vec![true]
}

/// The axes of an ablation grid; leaving an axis out keeps the single
/// default setting for it.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default = "default_fusions")]
    pub fusions: Vec<Fusion>,
    #[serde(default = "default_conv_kinds")]
    pub conv_kinds: Vec<ConvChoice>,
    #[serde(default = "default_modality_sets")]
    pub modality_sets: Vec<Vec<Modality>>,
    #[serde(default = "default_flags")]
    pub weighting: Vec<bool>,
    #[serde(default = "default_flags")]
    pub regularization: Vec<bool>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            fusions: default_fusions(),
            conv_kinds: default_conv_kinds(),
            modality_sets: default_modality_sets(),
            weighting: default_flags(),
            regularization: default_flags(),
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<(), TrainError> {
        let plan_err = |msg: String| Err(TrainError::Plan(msg));
        if self.fusions.is_empty()
            || self.conv_kinds.is_empty()
            || self.modality_sets.is_empty()
            || self.weighting.is_empty()
            || self.regularization.is_empty()
        {
            return plan_err("every grid axis needs at least one entry".into());
        }
        for set in &self.modality_sets {
            if set.is_empty() {
                return plan_err("a modality set in the grid is empty".into());
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.fusions.len()
            * self.conv_kinds.len()
            * self.modality_sets.len()
            * self.weighting.len()
            * self.regularization.len()
    }
}

/// One grid cell: the knob settings and their short descriptor, e.g.
/// `gmp/dps/acc+gyro+aud+ps/w+/reg+`.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub descriptor: String,
    pub fusion: Fusion,
    pub conv_kind: ConvChoice,
    pub modalities: Vec<Modality>,
    pub weighting: bool,
    pub regularization: bool,
    pub outcome: CvOutcome,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
}

fn descriptor(
    fusion: Fusion,
    kind: ConvChoice,
    modalities: &[Modality],
    weighting: bool,
    regularization: bool,
) -> String {
    let mods: Vec<String> = modalities.iter().map(|m| m.to_string()).collect();
    format!(
        "{}/{}/{}/{}/{}",
        fusion.name(),
        match kind {
            ConvChoice::Dps => "dps",
            ConvChoice::Standard => "std",
        },
        mods.join("+"),
        if weighting { "w+" } else { "w-" },
        if regularization { "reg+" } else { "reg-" },
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

impl AblationOutcome {
    /// One row per cell: descriptor, macro BA with across-fold SD, macro
    /// sensitivity, macro specificity.
    pub fn to_table(&self) -> String {
        let mut w = self.cells.iter().map(|c| c.descriptor.len()).max().unwrap_or(4);
        w = w.max("cell".len());
        let mut out = format!("{:<w$}  {:>8}  {:>8}  {:>8}  {:>8}\n", "cell", "ba", "sd", "sens", "spec");
        for cell in &self.cells {
            let s = &cell.outcome.summary;
            out.push_str(&format!(
                "{:<w$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
                cell.descriptor,
                fmt_opt(s.macro_ba),
                fmt_opt(s.sd_ba),
                fmt_opt(s.macro_sensitivity),
                fmt_opt(s.macro_specificity),
            ));
        }
        out
    }
}

/// Runs one cross-validation per grid cell. Every cell inherits `base` and
/// `plan` unchanged apart from the cell's knobs — in particular the seeds —
/// and a cell whose combination is structurally invalid (for example conv
/// fusion over a ps-only modality set) fails the run with its descriptor
/// named rather than being skipped silently.
pub fn run_ablation<T: Scalar>(
    base: &ModelConfig,
    plan: &TrainPlan,
    grid: &AblationGrid,
    ds: &Dataset,
    k: usize,
    threshold: f64,
) -> Result<AblationOutcome, TrainError> {
    grid.validate()?;
    let mut cells = Vec::new();
    for &fusion in &grid.fusions {
        for &conv_kind in &grid.conv_kinds {
            for mods in &grid.modality_sets {
                for &weighting in &grid.weighting {
                    for &regularization in &grid.regularization {
                        let mut config = base.clone();
                        config.fusion = fusion;
                        config.conv_kind = conv_kind;
                        config.modalities = mods.clone();
                        if !regularization {
                            config.l1_dense = 0.0;
                            config.l2_depthwise = 0.0;
                        }
                        let desc =
                            descriptor(fusion, conv_kind, mods, weighting, regularization);
                        let config = config.normalized().map_err(|e| {
                            TrainError::Plan(format!("grid cell {desc}: {e}"))
                        })?;
                        let mut cell_plan = plan.clone();
                        cell_plan.weighting = weighting;
                        let outcome = run_cv::<T>(&config, &cell_plan, ds, k, threshold)?;
                        cells.push(AblationCell {
                            descriptor: desc,
                            fusion,
                            conv_kind,
                            modalities: config.modalities.clone(),
                            weighting,
                            regularization,
                            outcome,
                        });
                    }
                }
            }
        }
    }
    Ok(AblationOutcome { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn tiny_setup() -> (ModelConfig, TrainPlan, Dataset) {
        let config = ModelConfig {
            label_count: 3,
            ps_width: 3,
            filters: Some([4, 8]),
            shared_units: Some([32, 16]),
            dropout: 0.0,
            l1_dense: 1e-4,
            l2_depthwise: 1e-4,
            ..ModelConfig::default()
        };
        let plan = TrainPlan {
            iterations: 4,
            batch_size: 8,
            lr: 1e-3,
            eval_cadence: 2,
            weighting: true,
            seed: 9,
        };
        let mut spec = SynthSpec::new(4, 16, 3, 0.0, 41);
        spec.noise = 0.1;
        (config, plan, synth_dataset(&spec).unwrap())
    }

    #[test]
    fn single_default_cell_matches_plain_cv() {
        let (config, plan, ds) = tiny_setup();
        let grid = AblationGrid::default();
        assert_eq!(grid.n_cells(), 1);
        let ab = run_ablation::<f64>(&config, &plan, &grid, &ds, 2, 0.5).unwrap();
        assert_eq!(ab.cells.len(), 1);
        let direct = run_cv::<f64>(&config, &plan, &ds, 2, 0.5).unwrap();
        assert_eq!(ab.cells[0].outcome.folds, direct.folds);
        assert_eq!(ab.cells[0].outcome.summary, direct.summary);
        assert_eq!(ab.cells[0].descriptor, "gmp/dps/acc+gyro+aud+ps/w+/reg+");
    }

    #[test]
    fn grid_cross_product_and_table() {
        let (config, plan, ds) = tiny_setup();
        let grid = AblationGrid {
            fusions: vec![Fusion::Gmp, Fusion::Gap],
            conv_kinds: vec![ConvChoice::Dps],
            modality_sets: vec![
                vec![Modality::Acc],
                vec![Modality::Acc, Modality::Ps],
            ],
            weighting: vec![true, false],
            regularization: vec![true],
        };
        assert_eq!(grid.n_cells(), 8);
        let ab = run_ablation::<f64>(&config, &plan, &grid, &ds, 2, 0.5).unwrap();
        assert_eq!(ab.cells.len(), 8);
        let descriptors: Vec<&str> =
            ab.cells.iter().map(|c| c.descriptor.as_str()).collect();
        assert!(descriptors.contains(&"gap/dps/acc+ps/w-/reg+"));
        let table = ab.to_table();
        assert_eq!(table.lines().count(), 9); // header + 8 cells
        for c in &ab.cells {
            assert!(table.contains(&c.descriptor));
        }
        // The regularization-off knob really clears the rates.
        let grid_off = AblationGrid {
            regularization: vec![false],
            ..AblationGrid::default()
        };
        let ab_off = run_ablation::<f64>(&config, &plan, &grid_off, &ds, 2, 0.5).unwrap();
        assert_eq!(ab_off.cells[0].descriptor, "gmp/dps/acc+gyro+aud+ps/w+/reg-");
    }

    #[test]
    fn grid_parses_from_toml_and_rejects_unknown_keys() {
        let text = r#"
            fusions = ["gmp", "conv"]
            modality_sets = [["acc", "gyro"], ["ps"]]
            weighting = [true, false]
        "#;
        let grid: AblationGrid = toml::from_str(text).unwrap();
        assert_eq!(grid.fusions, vec![Fusion::Gmp, Fusion::Conv]);
        assert_eq!(grid.conv_kinds, vec![ConvChoice::Dps]); // default
        assert_eq!(grid.n_cells(), 2 * 1 * 2 * 2 * 1);

        let bad = "fusions = [\"gmp\"]\nsurprise = 1\n";
        assert!(toml::from_str::<AblationGrid>(bad).is_err());
    }

    #[test]
    fn invalid_cell_names_itself() {
        let (config, plan, ds) = tiny_setup();
        let grid = AblationGrid {
            fusions: vec![Fusion::Conv],
            modality_sets: vec![vec![Modality::Ps]],
            ..AblationGrid::default()
        };
        let err = run_ablation::<f64>(&config, &plan, &grid, &ds, 2, 0.5).unwrap_err();
        match err {
            TrainError::Plan(msg) => assert!(msg.contains("conv/dps/ps")),
            other => panic!("expected plan error, got {other}"),
        }
    }
}
