//! End-to-end run composition: build → pretrain → transfer → fine-tune,
//! and the seed-averaged comparison between self-supervised and
//! data-independent initialization under equal epoch budgets.

use super::checkpoint::{load_checkpoint, transfer_weights, Checkpoint, TransferReport};
use super::train::{train_step1, train_step2, Step1Artifacts, Step2Artifacts};
use super::{InitSource, RunConfig};
use crate::dataio::VolumeSample;
use crate::error::{Result, VoxError};
use crate::model::{InitOptions, Model, ModelConfig, Stage};

/// Keeps the fine-tune head initialization stream disjoint from the
/// pretrain weight stream (both derive from the same run seed).
const SEG_INIT_STREAM: u64 = 0x7365676d656e7431;

/// Fresh pretrain-stage model initialized with the run's step-1 scheme.
pub fn pretrain_model(model_cfg: &ModelConfig, cfg: &RunConfig) -> Result<Model<f32>> {
    let mut model = Model::new(model_cfg.clone(), Stage::Pretrain)?;
    model.init_weights(
        cfg.step1.scheme.parse()?,
        &InitOptions {
            seed: cfg.seed,
            ..InitOptions::default()
        },
    )?;
    Ok(model)
}

/// Fresh segment-stage model, seeded per `cfg.step2.init_source`: either a
/// scheme over every parameter, or a checkpoint transfer over the trunk
/// with only the segmentation head keeping its fresh initialization.
/// `ckpt` short-circuits the checkpoint path for in-memory pipelines.
pub fn finetune_model(
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    ckpt: Option<&Checkpoint>,
) -> Result<(Model<f32>, Option<TransferReport>)> {
    let mut model = Model::new(model_cfg.clone(), Stage::Segment)?;
    let opts = InitOptions {
        seed: cfg.seed ^ SEG_INIT_STREAM,
        ..InitOptions::default()
    };
    match (&cfg.step2.init_source, ckpt) {
        (InitSource::Scheme(s), None) => {
            model.init_weights(s.parse()?, &opts)?;
            Ok((model, None))
        }
        (InitSource::Scheme(_), Some(_)) => Err(VoxError::usage(
            "a checkpoint was supplied but init_source asks for a scheme",
        )),
        (InitSource::Checkpoint(_), Some(c)) => {
            model.init_weights("unetr-default".parse()?, &opts)?;
            let report = transfer_weights(c, &mut model)?;
            Ok((model, Some(report)))
        }
        (InitSource::Checkpoint(path), None) => {
            model.init_weights("unetr-default".parse()?, &opts)?;
            let loaded = load_checkpoint(path)?;
            let report = transfer_weights(&loaded, &mut model)?;
            Ok((model, Some(report)))
        }
    }
}

/// Pretrain, transfer, fine-tune — all in memory.
pub fn run_two_step(
    train: &[VolumeSample],
    val: &[VolumeSample],
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
) -> Result<(Step1Artifacts, Step2Artifacts, TransferReport)> {
    let mut m1 = pretrain_model(model_cfg, cfg)?;
    let art1 = train_step1(train, &mut m1, cfg)?;
    let mut handoff = cfg.clone();
    handoff.step2.init_source = InitSource::Checkpoint("<in-memory>".into());
    let (mut m2, report) = finetune_model(model_cfg, &handoff, Some(&art1.checkpoint))?;
    let art2 = train_step2(train, val, &mut m2, &handoff)?;
    Ok((art1, art2, report.expect("checkpoint transfer ran")))
}

/// One arm of the comparison, averaged over seeds.
#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub label: String,
    /// Final-epoch mean validation Dice, one entry per seed.
    pub seed_dice: Vec<f64>,
    pub mean_dice: f64,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    /// Budget accounting: step-1 plus step-2 epochs actually spent.
    pub total_epochs: usize,
    /// Per-seed validation CSVs, for determinism checks.
    pub val_csvs: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ComparisonOutcome {
    /// Self-supervised initialization, then fine-tuning.
    pub pretrained: ArmOutcome,
    /// Data-independent initialization with the whole budget on step 2.
    pub baseline: ArmOutcome,
}

fn final_val_dice(art: &Step2Artifacts) -> Result<f64> {
    art.val_history
        .last()
        .map(|(_, r)| r.mean)
        .ok_or_else(|| VoxError::usage("no validation epochs were run"))
}

/// Train both arms for each seed under equal total epoch budgets:
/// `step1.epochs + step2.epochs` for the pretrained arm, the same sum all
/// on step 2 for the baseline arm.
pub fn run_initialization_comparison(
    train: &[VolumeSample],
    val: &[VolumeSample],
    model_cfg: &ModelConfig,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<ComparisonOutcome> {
    if seeds.is_empty() {
        return Err(VoxError::usage("comparison needs at least one seed"));
    }
    base.validate()?;
    let budget = base.step1.epochs + base.step2.epochs;

    let mut pre = ArmOutcome {
        label: format!(
            "self-supervised ({}+{} epochs)",
            base.step1.epochs, base.step2.epochs
        ),
        seed_dice: Vec::new(),
        mean_dice: 0.0,
        step1_epochs: base.step1.epochs,
        step2_epochs: base.step2.epochs,
        total_epochs: budget,
        val_csvs: Vec::new(),
    };
    let mut bare = ArmOutcome {
        label: format!("{} (0+{budget} epochs)", base.step1.scheme),
        seed_dice: Vec::new(),
        mean_dice: 0.0,
        step1_epochs: 0,
        step2_epochs: budget,
        total_epochs: budget,
        val_csvs: Vec::new(),
    };

    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (_, art2, _) = run_two_step(train, val, model_cfg, &cfg)?;
        pre.seed_dice.push(final_val_dice(&art2)?);
        pre.val_csvs.push(art2.val_csv);

        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.step2.epochs = budget;
        cfg.step2.init_source = InitSource::Scheme(base.step1.scheme.clone());
        let (mut model, _) = finetune_model(model_cfg, &cfg, None)?;
        let art2 = train_step2(train, val, &mut model, &cfg)?;
        bare.seed_dice.push(final_val_dice(&art2)?);
        bare.val_csvs.push(art2.val_csv);
    }

    pre.mean_dice = pre.seed_dice.iter().sum::<f64>() / pre.seed_dice.len() as f64;
    bare.mean_dice = bare.seed_dice.iter().sum::<f64>() / bare.seed_dice.len() as f64;
    Ok(ComparisonOutcome {
        pretrained: pre,
        baseline: bare,
    })
}
