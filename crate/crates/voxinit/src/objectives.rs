//! Losses and metrics: per-slot order-prediction cross-entropy, voxel MSE
//! reconstruction, their unweighted sum for self-supervision, Dice+CE for
//! segmentation, and the percentage Dice evaluation metric.
//!
//! Each loss exists in two forms: a tape builder (differentiable, used by
//! the training loops) and a plain evaluator with validation (used by tests
//! and reporting). The evaluators run the same graph at f64, so there is
//! one formula implementation per loss.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transform::PermutationRecord;

pub const DICE_EPS: f64 = 1e-5;
pub const LOG_EPS: f64 = 1e-12;
const PROB_TOL: f64 = 1e-4;

/// Self-supervised loss breakdown for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_rec: f64,
    pub l_total: f64,
    /// Order-prediction term per tapped level, summing to `l_cls`.
    pub per_level: Vec<f64>,
}

/// Percentage Dice per foreground class, background excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Dice denominator form: the printed formula squares both operands; some
/// implementations in the same family use plain sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceDenominator {
    #[default]
    Squared,
    Plain,
}

impl std::str::FromStr for DiceDenominator {
    type Err = VoxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(DiceDenominator::Squared),
            "plain" => Ok(DiceDenominator::Plain),
            other => Err(VoxError::usage(format!(
                "unknown dice denominator '{other}' (expected 'squared' or 'plain')"
            ))),
        }
    }
}

impl std::fmt::Display for DiceDenominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiceDenominator::Squared => "squared",
            DiceDenominator::Plain => "plain",
        })
    }
}

/// Slot-f one-hot mask for a permutation: row f is one at class
/// `order[f]` (the original index of the sub-volume sitting in slot f).
fn order_targets<T: Scalar>(order: &PermutationRecord) -> Tensor<T> {
    let b = order.b;
    let mut data = vec![T::zero(); b * b];
    for (f, &k) in order.order.iter().enumerate() {
        data[f * b + k] = T::one();
    }
    Tensor::from_vec(&[b, b], data).expect("square mask")
}

/// Order-prediction loss over all levels, plus the per-level terms.
/// Each level's logits are (slots, B); slot rows are scored by categorical
/// cross-entropy against the permutation's one-hot targets and summed.
pub fn order_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[NodeId],
    order: &PermutationRecord,
) -> Result<(NodeId, Vec<NodeId>)> {
    if logits.is_empty() {
        return Err(VoxError::usage("order loss needs at least one level"));
    }
    order.validate()?;
    let b = order.b;
    let mask = tape.constant(order_targets::<T>(order));
    let mut per_level = Vec::with_capacity(logits.len());
    for (i, &t) in logits.iter().enumerate() {
        let shape = tape.value(t).shape().to_vec();
        if shape.len() != 2 || shape[1] != b {
            return Err(VoxError::shape(format!(
                "level {i} logits shaped {shape:?}: want (slots, {b}) to match the \
                 {b}-way permutation"
            )));
        }
        if shape[0] != b {
            return Err(VoxError::shape(format!(
                "level {i} has {} slots but the permutation covers {b}",
                shape[0]
            )));
        }
        let lp = tape.log_softmax(t, 1)?;
        let picked = tape.mul(lp, mask)?;
        let s = tape.sum(picked);
        per_level.push(tape.neg(s));
    }
    let mut total = per_level[0];
    for &l in &per_level[1..] {
        total = tape.add(total, l)?;
    }
    Ok((total, per_level))
}

/// Voxel-wise mean squared error over ALL voxels of identically shaped
/// volumes (no masking of the averaging set).
pub fn recon_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let (sp, st) = (tape.value(pred).shape(), tape.value(target).shape());
    if sp != st {
        return Err(VoxError::shape(format!(
            "reconstruction loss needs identical shapes, got {sp:?} and {st:?}"
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Dice+CE on probabilities (J,H,W,D) against a one-hot target of the same
/// shape. Trusts the caller on normalization; the evaluating wrapper
/// [`dice_ce_loss`] validates.
pub fn dice_ce_node<T: Scalar>(
    tape: &mut Tape<T>,
    probs: NodeId,
    onehot: NodeId,
    denom: DiceDenominator,
) -> Result<NodeId> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 4 || tape.value(onehot).shape() != shape {
        return Err(VoxError::shape(format!(
            "dice+ce needs matching (J,H,W,D) tensors, got {:?} and {:?}",
            shape,
            tape.value(onehot).shape()
        )));
    }
    let j = shape[0];
    let n: usize = shape[1..].iter().product();
    let spatial = [1usize, 2, 3];

    let num_prod = tape.mul(onehot, probs)?;
    let num = tape.sum_axes(num_prod, &spatial)?;
    let (py, pp) = match denom {
        DiceDenominator::Squared => {
            let yy = tape.mul(onehot, onehot)?;
            let pp = tape.mul(probs, probs)?;
            (yy, pp)
        }
        DiceDenominator::Plain => (onehot, probs),
    };
    let den_y = tape.sum_axes(py, &spatial)?;
    let den_p = tape.sum_axes(pp, &spatial)?;
    let den = tape.add(den_y, den_p)?;
    let den = tape.add_scalar(den, T::from_f64(DICE_EPS));
    let frac = tape.div(num, den)?;
    let dice_sum = tape.sum(frac);
    let dice_term = tape.scale(dice_sum, T::from_f64(2.0 / j as f64));

    let lp = tape.log_clamped(probs, T::from_f64(LOG_EPS))?;
    let ce_prod = tape.mul(onehot, lp)?;
    let ce_sum = tape.sum(ce_prod);
    let ce_term = tape.scale(ce_sum, T::from_f64(1.0 / n as f64));

    let both = tape.add(dice_term, ce_term)?;
    let neg = tape.neg(both);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Dice+CE straight from segmentation logits [1,J,H,W,D]: softmax over the
/// class axis, then [`dice_ce_node`].
pub fn dice_ce_from_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    onehot: &Tensor<T>,
    denom: DiceDenominator,
) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(VoxError::shape(format!(
            "segmentation logits must be [1,J,H,W,D], got {shape:?}"
        )));
    }
    let probs = tape.softmax(logits, 1)?;
    let probs = tape.reshape(probs, &shape[1..])?;
    let y = tape.constant(onehot.clone());
    dice_ce_node(tape, probs, y, denom)
}

/// Evaluating wrapper: total order-prediction loss across levels.
pub fn order_prediction_loss<T: Scalar>(
    logits: &[Tensor<T>],
    order: &PermutationRecord,
) -> Result<f64> {
    Ok(order_loss_values(logits, order)?.iter().sum())
}

/// Per-level order-prediction terms, evaluated at f64.
pub fn order_loss_values<T: Scalar>(
    logits: &[Tensor<T>],
    order: &PermutationRecord,
) -> Result<Vec<f64>> {
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<NodeId> = logits
        .iter()
        .map(|t| tape.constant(t.cast::<f64>()))
        .collect();
    let (_, per_level) = order_loss_node(&mut tape, &ids, order)?;
    Ok(per_level.iter().map(|&n| tape.value(n).item()).collect())
}

/// Mean squared error over all voxels; shapes must match exactly.
pub fn reconstruction_loss<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    if target.shape() != pred.shape() {
        return Err(VoxError::shape(format!(
            "reconstruction loss needs identical shapes, got {:?} and {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    let n = target.numel() as f64;
    let sum: f64 = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Combine per-level order terms and the reconstruction term, unweighted.
pub fn ssl_loss(per_level_cls: &[f64], l_rec: f64) -> LossReport {
    let l_cls: f64 = per_level_cls.iter().sum();
    LossReport {
        l_cls,
        l_rec,
        l_total: l_cls + l_rec,
        per_level: per_level_cls.to_vec(),
    }
}

/// Evaluating wrapper: Dice+CE with full validation of the probability and
/// one-hot preconditions.
pub fn dice_ce_loss<T: Scalar>(
    onehot: &Tensor<T>,
    probs: &Tensor<T>,
    denom: DiceDenominator,
) -> Result<f64> {
    if onehot.shape() != probs.shape() || onehot.rank() != 4 {
        return Err(VoxError::shape(format!(
            "dice+ce needs matching (J,H,W,D) tensors, got {:?} and {:?}",
            onehot.shape(),
            probs.shape()
        )));
    }
    let j = onehot.shape()[0];
    let n: usize = onehot.shape()[1..].iter().product();
    for vox in 0..n {
        let mut psum = 0.0;
        let mut ysum = 0.0;
        for c in 0..j {
            let p = probs.data()[c * n + vox].to_f64_lossy();
            let y = onehot.data()[c * n + vox].to_f64_lossy();
            if y != 0.0 && y != 1.0 {
                return Err(VoxError::usage(format!(
                    "target is not one-hot at voxel {vox}, class {c}: {y}"
                )));
            }
            psum += p;
            ysum += y;
        }
        if (psum - 1.0).abs() > PROB_TOL {
            return Err(VoxError::usage(format!(
                "probabilities at voxel {vox} sum to {psum}, not 1"
            )));
        }
        if ysum != 1.0 {
            return Err(VoxError::usage(format!(
                "target rows must one-hot exactly one class, voxel {vox} has {ysum}"
            )));
        }
    }
    let mut tape: Tape<f64> = Tape::new();
    let p = tape.constant(probs.cast::<f64>());
    let y = tape.constant(onehot.cast::<f64>());
    let loss = dice_ce_node(&mut tape, p, y, denom)?;
    Ok(tape.value(loss).item())
}

/// One-hot encode integer labels into a (J,H,W,D) tensor.
pub fn one_hot<T: Scalar>(labels: &[u16], dims: [usize; 3], j: usize) -> Result<Tensor<T>> {
    let n = dims[0] * dims[1] * dims[2];
    if labels.len() != n {
        return Err(VoxError::shape(format!(
            "{} labels do not fill dims {dims:?}",
            labels.len()
        )));
    }
    let mut data = vec![T::zero(); j * n];
    for (vox, &l) in labels.iter().enumerate() {
        if (l as usize) >= j {
            return Err(VoxError::usage(format!(
                "label {l} at voxel {vox} out of range for {j} classes"
            )));
        }
        data[l as usize * n + vox] = T::one();
    }
    Tensor::from_vec(&[j, dims[0], dims[1], dims[2]], data)
}

/// Percentage Dice per foreground class. Both classes empty scores 100,
/// exactly one empty scores 0.
pub fn dice_metric(pred: &[u16], truth: &[u16], j: usize) -> Result<DiceReport> {
    if j < 2 {
        return Err(VoxError::config("dice metric needs at least 2 classes"));
    }
    if pred.len() != truth.len() {
        return Err(VoxError::shape(format!(
            "label volumes differ in size: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut p_count = vec![0usize; j];
    let mut g_count = vec![0usize; j];
    let mut i_count = vec![0usize; j];
    for (&p, &g) in pred.iter().zip(truth) {
        if (p as usize) >= j || (g as usize) >= j {
            return Err(VoxError::usage(format!(
                "label value {} out of range for {j} classes",
                p.max(g)
            )));
        }
        p_count[p as usize] += 1;
        g_count[g as usize] += 1;
        if p == g {
            i_count[p as usize] += 1;
        }
    }
    let per_class: Vec<f64> = (1..j)
        .map(|c| {
            if p_count[c] == 0 && g_count[c] == 0 {
                100.0
            } else {
                100.0 * 2.0 * i_count[c] as f64 / (p_count[c] + g_count[c]) as f64
            }
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(DiceReport { per_class, mean })
}

pub fn ssl_csv_header() -> &'static str {
    "epoch,L_cls,L_rec,L_total"
}

pub fn ssl_csv_row(epoch: usize, r: &LossReport) -> String {
    format!("{epoch},{},{},{}", r.l_cls, r.l_rec, r.l_total)
}

pub fn dice_csv_header(j: usize) -> String {
    let cols: Vec<String> = (1..j).map(|c| format!("dice_c{c}")).collect();
    format!("epoch,{},mean_dice", cols.join(","))
}

pub fn dice_csv_row(epoch: usize, r: &DiceReport) -> String {
    let cols: Vec<String> = r.per_class.iter().map(|v| v.to_string()).collect();
    format!("{epoch},{},{}", cols.join(","), r.mean)
}
