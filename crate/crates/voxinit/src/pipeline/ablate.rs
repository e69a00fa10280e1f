//! Ablation sweeps over order-head subsets and mask ratios. This module
//! only executes the grid and tabulates results; it asserts nothing
//! about which setting wins.

use super::experiment::run_two_step;
use super::RunConfig;
use crate::dataio::VolumeSample;
use crate::error::{Result, VoxError};
use crate::model::ModelConfig;

/// Deepest-first suffix subsets of the m tapped levels:
/// {m}, {m-1, m}, …, {1..m}.
pub fn head_subsets(m: usize) -> Vec<Vec<usize>> {
    (1..=m).rev().map(|k| (k..=m).collect()).collect()
}

/// The masking sweep grid.
pub fn mask_ratios() -> [f64; 5] {
    [0.0, 0.2, 0.4, 0.6, 0.8]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// Which knob was varied: "heads" or "mask_ratio".
    pub group: String,
    pub setting: String,
    /// Final-epoch mean validation Dice.
    pub mean_val_dice: f64,
}

fn heads_label(subset: &[usize]) -> String {
    subset
        .iter()
        .map(|h| format!("t{h}"))
        .collect::<Vec<_>>()
        .join("+")
}

/// Run the full two-step pipeline once per head subset and once per mask
/// ratio, all other settings held at `base`. Returns the rows plus a CSV
/// rendering (`group,setting,mean_val_dice`).
pub fn run_ablations(
    train: &[VolumeSample],
    val: &[VolumeSample],
    model_cfg: &ModelConfig,
    base: &RunConfig,
) -> Result<(Vec<AblationRow>, String)> {
    base.validate()?;
    let mut rows = Vec::new();

    for subset in head_subsets(model_cfg.levels) {
        let mut cfg = base.clone();
        cfg.step1.heads_used = subset.clone();
        let (_, art2, _) = run_two_step(train, val, model_cfg, &cfg)?;
        let (_, report) = art2
            .val_history
            .last()
            .ok_or_else(|| VoxError::usage("ablation run produced no validation epochs"))?;
        rows.push(AblationRow {
            group: "heads".into(),
            setting: heads_label(&subset),
            mean_val_dice: report.mean,
        });
    }

    for ratio in mask_ratios() {
        let mut cfg = base.clone();
        cfg.step1.mask_ratio = ratio;
        let (_, art2, _) = run_two_step(train, val, model_cfg, &cfg)?;
        let (_, report) = art2
            .val_history
            .last()
            .ok_or_else(|| VoxError::usage("ablation run produced no validation epochs"))?;
        rows.push(AblationRow {
            group: "mask_ratio".into(),
            setting: ratio.to_string(),
            mean_val_dice: report.mean,
        });
    }

    let mut csv = String::from("group,setting,mean_val_dice\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.group, r.setting, r.mean_val_dice));
    }
    Ok((rows, csv))
}
