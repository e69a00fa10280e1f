//! Two-step training orchestration: self-supervised initialization
//! (step 1), weight transfer, supervised segmentation (step 2), sliding
//! window inference, evaluation, checkpointing, and ablation sweeps.

mod ablate;
mod checkpoint;
mod experiment;
mod infer;
mod train;

pub use ablate::{head_subsets, mask_ratios, run_ablations, AblationRow};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, transfer_weights, Checkpoint, TransferReport,
};
pub use experiment::{
    finetune_model, pretrain_model, run_initialization_comparison, run_two_step, ArmOutcome,
    ComparisonOutcome,
};
pub use infer::{
    evaluate, mean_dice_reports, sliding_window_infer, window_starts, write_eval, EvalRow,
    EvalSummary,
};
pub use train::{train_step1, train_step2, Step1Artifacts, Step2Artifacts};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VoxError};
use crate::init::Scheme;
use crate::objectives::DiceDenominator;

/// Where step 2 gets its starting trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitSource {
    /// Transfer trunk weights from a step-1 checkpoint.
    Checkpoint(PathBuf),
    /// Data-independent scheme, applied to the whole model.
    Scheme(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step1Config {
    pub epochs: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub mask_patch: usize,
    /// 1-based tapped levels whose order heads contribute to the loss.
    pub heads_used: Vec<usize>,
    /// Scheme that seeds the model before self-supervision.
    pub scheme: String,
}

impl Default for Step1Config {
    fn default() -> Self {
        Step1Config {
            epochs: 200,
            lr: 1e-3,
            mask_ratio: 0.40,
            mask_patch: 4,
            heads_used: vec![1, 2, 3, 4],
            scheme: "unetr-default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step2Config {
    pub epochs: usize,
    pub lr: f64,
    pub init_source: InitSource,
}

impl Default for Step2Config {
    fn default() -> Self {
        Step2Config {
            epochs: 200,
            lr: 1e-3,
            init_source: InitSource::Scheme("unetr-default".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub step1: Step1Config,
    pub step2: Step2Config,
    pub seed: u64,
    /// Validation cadence for step 2, in epochs.
    pub val_every: usize,
    pub dice_denominator: DiceDenominator,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            step1: Step1Config::default(),
            step2: Step2Config::default(),
            seed: 0,
            val_every: 10,
            dice_denominator: DiceDenominator::Squared,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step1.epochs < 1 || self.step2.epochs < 1 {
            return Err(VoxError::config("epochs must be >= 1 for both steps"));
        }
        if self.step1.heads_used.is_empty() {
            return Err(VoxError::config("step1 needs at least one order head"));
        }
        let mut seen = std::collections::HashSet::new();
        for &h in &self.step1.heads_used {
            if h < 1 || !seen.insert(h) {
                return Err(VoxError::config(format!(
                    "heads_used {:?} must be unique 1-based level indices",
                    self.step1.heads_used
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.step1.mask_ratio) {
            return Err(VoxError::config(format!(
                "mask ratio {} outside [0, 1]",
                self.step1.mask_ratio
            )));
        }
        if self.step1.mask_patch == 0 {
            return Err(VoxError::config("mask patch must be >= 1"));
        }
        for (lr, step) in [(self.step1.lr, "step1"), (self.step2.lr, "step2")] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(VoxError::config(format!("{step} lr {lr} invalid")));
            }
        }
        self.step1.scheme.parse::<Scheme>()?;
        if let InitSource::Scheme(s) = &self.step2.init_source {
            s.parse::<Scheme>()?;
        }
        if self.val_every == 0 {
            return Err(VoxError::config("val_every must be >= 1"));
        }
        Ok(())
    }
}
