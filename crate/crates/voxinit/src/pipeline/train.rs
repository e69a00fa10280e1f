//! The two training steps: self-supervised order-plus-reconstruction
//! pretraining, and supervised dice-cross-entropy segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::infer::{full_volume_labels, mean_dice_reports};
use super::{Checkpoint, RunConfig};
use crate::dataio::{normalize, VolumeSample};
use crate::error::{Result, VoxError};
use crate::model::Model;
use crate::objectives::{
    dice_ce_from_logits, dice_csv_header, dice_csv_row, dice_metric, one_hot, order_loss_node,
    recon_loss_node, ssl_csv_header, ssl_csv_row, ssl_loss, DiceReport, LossReport,
};
use crate::tensor::optim::{AdamWParams, OptimizerState};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::transform::{make_masked_shuffled, TransformConfig};

/// Keeps the per-iteration transform stream disjoint from the weight-init
/// stream, which is seeded with the run seed directly.
const TRANSFORM_STREAM: u64 = 0x7472616e73666f72;

#[derive(Clone, Debug)]
pub struct Step1Artifacts {
    pub checkpoint: Checkpoint,
    /// Per-epoch mean losses, in epoch order.
    pub history: Vec<LossReport>,
    /// CSV text mirroring `history`.
    pub csv: String,
}

#[derive(Clone, Debug)]
pub struct Step2Artifacts {
    pub checkpoint: Checkpoint,
    /// Per-epoch mean training loss.
    pub train_loss: Vec<f64>,
    /// Validation Dice at each validated epoch.
    pub val_history: Vec<(usize, DiceReport)>,
    /// CSV of per-epoch training loss.
    pub train_csv: String,
    /// CSV of validation Dice rows.
    pub val_csv: String,
}

/// Prepend the batch dimension the model expects.
fn batched(x: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshaped(&shape).expect("same element count")
}

fn finite_or_abort(value: f64, what: &str, epoch: usize, iteration: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(VoxError::numerical(format!(
            "{what} became {value} at epoch {epoch}, iteration {iteration}; aborting"
        )))
    }
}

/// One optimizer step from an already-built scalar loss node.
fn step_params(
    tape: &Tape<f32>,
    loss: crate::tensor::tape::NodeId,
    lease: &crate::model::Lease,
    model: &mut Model<f32>,
    opt: &mut OptimizerState<f32>,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let mut grad_vec = Vec::with_capacity(lease.ids().len());
    for &id in lease.ids() {
        match grads.take(id) {
            Some(g) => grad_vec.push(g),
            None => grad_vec.push(Tensor::zeros(tape.value(id).shape())),
        }
    }
    let (names, mut params) = model.param_slices();
    opt.apply(&names, &mut params, &grad_vec)
}

/// Self-supervised pretraining: every iteration draws a fresh
/// shuffle+mask of one volume, predicts the sub-volume order at each
/// tapped level and reconstructs the unmasked shuffled volume, and
/// descends their summed losses with AdamW.
pub fn train_step1(
    train: &[VolumeSample],
    model: &mut Model<f32>,
    cfg: &RunConfig,
) -> Result<Step1Artifacts> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(VoxError::usage("step 1 needs at least one training volume"));
    }
    let b = model.cfg.b();
    if b < 2 {
        return Err(VoxError::config(format!(
            "order prediction needs >= 2 depth sub-volumes, got {b} \
             (depth {} / patch {})",
            model.cfg.dims[2],
            model.cfg.patch
        )));
    }
    for &h in &cfg.step1.heads_used {
        if h > model.cfg.levels {
            return Err(VoxError::config(format!(
                "heads_used references level {h} but the model taps {} levels",
                model.cfg.levels
            )));
        }
    }

    let images: Vec<Tensor<f32>> = train.iter().map(|s| normalize(&s.image)).collect();
    let mut opt = OptimizerState::adamw(AdamWParams {
        lr: cfg.step1.lr as f32,
        ..AdamWParams::default()
    });
    let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRANSFORM_STREAM);

    let mut history = Vec::with_capacity(cfg.step1.epochs);
    let mut rows = vec![ssl_csv_header().to_string()];
    for epoch in 1..=cfg.step1.epochs {
        let mut sum_per_level = vec![0.0; cfg.step1.heads_used.len()];
        let mut sum_rec = 0.0;
        for (iteration, image) in images.iter().enumerate() {
            let tcfg = TransformConfig {
                b,
                mask_ratio: cfg.step1.mask_ratio,
                mask_patch: [cfg.step1.mask_patch; 3],
                fill_value: 0.0,
                seed: stream.gen(),
            };
            let (masked, perm, _mask, target) = make_masked_shuffled(image, &tcfg)?;

            let mut tape = Tape::new();
            let lease = model.lease(&mut tape, true);
            let x = tape.constant(batched(&masked));
            let t = tape.constant(batched(&target));
            let enc = model.encode(&mut tape, &lease, x)?;
            let logits = model.order_heads(&mut tape, &lease, &enc)?;
            let used: Vec<_> = cfg
                .step1
                .heads_used
                .iter()
                .map(|&h| logits[h - 1])
                .collect();
            let (cls, per_level) = order_loss_node(&mut tape, &used, &perm)?;
            let pred = model.decode_reconstruct(&mut tape, &lease, &enc)?;
            let rec = recon_loss_node(&mut tape, pred, t)?;
            let total = tape.add(cls, rec)?;

            let l_total = tape.value(total).data()[0] as f64;
            finite_or_abort(l_total, "training loss", epoch, iteration)?;
            for (s, &n) in sum_per_level.iter_mut().zip(&per_level) {
                *s += tape.value(n).data()[0] as f64;
            }
            sum_rec += tape.value(rec).data()[0] as f64;

            step_params(&tape, total, &lease, model, &mut opt)?;
        }
        let n = images.len() as f64;
        let means: Vec<f64> = sum_per_level.iter().map(|s| s / n).collect();
        let report = ssl_loss(&means, sum_rec / n);
        rows.push(ssl_csv_row(epoch, &report));
        history.push(report);
    }

    Ok(Step1Artifacts {
        checkpoint: Checkpoint::from_model(model, cfg),
        history,
        csv: rows.join("\n") + "\n",
    })
}

/// Supervised fine-tuning with the dice-cross-entropy compound loss,
/// validating on held-out volumes every `val_every` epochs and at the end.
pub fn train_step2(
    train: &[VolumeSample],
    val: &[VolumeSample],
    model: &mut Model<f32>,
    cfg: &RunConfig,
) -> Result<Step2Artifacts> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(VoxError::usage("step 2 needs at least one training volume"));
    }
    let j = model.cfg.classes;
    let images: Vec<Tensor<f32>> = train.iter().map(|s| normalize(&s.image)).collect();
    let targets: Vec<Tensor<f32>> = train
        .iter()
        .map(|s| one_hot(&s.labels, s.dims, j))
        .collect::<Result<_>>()?;
    let val_images: Vec<Tensor<f32>> = val.iter().map(|s| normalize(&s.image)).collect();

    let mut opt = OptimizerState::adamw(AdamWParams {
        lr: cfg.step2.lr as f32,
        ..AdamWParams::default()
    });

    let mut train_loss = Vec::with_capacity(cfg.step2.epochs);
    let mut val_history = Vec::new();
    let mut train_rows = vec!["epoch,dice_ce".to_string()];
    let mut val_rows = vec![dice_csv_header(j)];
    for epoch in 1..=cfg.step2.epochs {
        let mut sum = 0.0;
        for (iteration, (image, target)) in images.iter().zip(&targets).enumerate() {
            let mut tape = Tape::new();
            let lease = model.lease(&mut tape, true);
            let x = tape.constant(batched(image));
            let enc = model.encode(&mut tape, &lease, x)?;
            let logits = model.decode_segment(&mut tape, &lease, &enc)?;
            let loss = dice_ce_from_logits(&mut tape, logits, target, cfg.dice_denominator)?;

            let l = tape.value(loss).data()[0] as f64;
            finite_or_abort(l, "segmentation loss", epoch, iteration)?;
            sum += l;

            step_params(&tape, loss, &lease, model, &mut opt)?;
        }
        let mean = sum / images.len() as f64;
        train_loss.push(mean);
        train_rows.push(format!("{epoch},{mean}"));

        if epoch % cfg.val_every == 0 || epoch == cfg.step2.epochs {
            let mut reports = Vec::with_capacity(val.len());
            for (sample, image) in val.iter().zip(&val_images) {
                let pred = full_volume_labels(model, image)?;
                reports.push(dice_metric(&pred, &sample.labels, j)?);
            }
            if !reports.is_empty() {
                let report = mean_dice_reports(&reports);
                val_rows.push(dice_csv_row(epoch, &report));
                val_history.push((epoch, report));
            }
        }
    }

    Ok(Step2Artifacts {
        checkpoint: Checkpoint::from_model(model, cfg),
        train_loss,
        val_history,
        train_csv: train_rows.join("\n") + "\n",
        val_csv: val_rows.join("\n") + "\n",
    })
}
