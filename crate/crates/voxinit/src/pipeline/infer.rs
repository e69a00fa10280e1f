//! Full-volume and sliding-window inference, plus dataset evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{normalize, VolumeSample};
use crate::error::{Result, VoxError};
use crate::model::Model;
use crate::objectives::{dice_metric, DiceReport};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Window starts along one axis: 0, stride, 2·stride, … with
/// stride = round(window·(1−overlap)), plus a final start clamped flush
/// to the boundary so the last voxels are always covered.
pub fn window_starts(extent: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if window == 0 || window > extent {
        return Err(VoxError::usage(format!(
            "window {window} does not fit extent {extent}; for small volumes run \
             full-volume inference with window == volume"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(VoxError::config(format!(
            "overlap {overlap} outside [0, 1)"
        )));
    }
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < extent {
        starts.push(s);
        s += stride;
    }
    starts.push(extent - window);
    Ok(starts)
}

/// One forward pass over a `[C, h, w, d]` piece; returns segmentation
/// logits `[1, J, h, w, d]`.
fn window_logits(model: &Model<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let lease = model.lease(&mut tape, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.constant(image.reshaped(&shape)?);
    let enc = model.encode(&mut tape, &lease, x)?;
    let logits = model.decode_segment(&mut tape, &lease, &enc)?;
    Ok(tape.value(logits).clone())
}

/// Ascending argmax over class channels; ties go to the lower class.
fn argmax_classes(logits: &[f32], j: usize, voxels: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(voxels);
    for v in 0..voxels {
        let mut best = 0usize;
        for c in 1..j {
            if logits[c * voxels + v] > logits[best * voxels + v] {
                best = c;
            }
        }
        out.push(best as u16);
    }
    out
}

/// Direct forward + argmax for an image whose dims match the model.
/// Expects an already-normalized image.
pub(crate) fn full_volume_labels(model: &Model<f32>, image: &Tensor<f32>) -> Result<Vec<u16>> {
    let logits = window_logits(model, image)?;
    let voxels = logits.shape()[2] * logits.shape()[3] * logits.shape()[4];
    Ok(argmax_classes(logits.data(), model.cfg.classes, voxels))
}

fn copy_window(
    image: &Tensor<f32>,
    start: [usize; 3],
    window: [usize; 3],
) -> Tensor<f32> {
    let c = image.shape()[0];
    let (h, w, d) = (image.shape()[1], image.shape()[2], image.shape()[3]);
    let src = image.data();
    let mut data = Vec::with_capacity(c * window[0] * window[1] * window[2]);
    for ch in 0..c {
        for i in 0..window[0] {
            for jj in 0..window[1] {
                let row = ((ch * h + start[0] + i) * w + start[1] + jj) * d + start[2];
                data.extend_from_slice(&src[row..row + window[2]]);
            }
        }
    }
    Tensor::from_vec(&[c, window[0], window[1], window[2]], data).expect("window shape")
}

/// Tile the volume with windows of the model's input size, average the
/// logits of overlapping windows uniformly, and argmax over classes.
/// Expects an already-normalized image `[C, H, W, D]`.
pub fn sliding_window_infer(
    model: &Model<f32>,
    image: &Tensor<f32>,
    window: [usize; 3],
    overlap: f64,
) -> Result<Vec<u16>> {
    if window != model.cfg.dims {
        return Err(VoxError::config(format!(
            "window {window:?} must match the model input size {:?}",
            model.cfg.dims
        )));
    }
    if image.rank() != 4 || image.shape()[0] != model.cfg.in_channels {
        return Err(VoxError::shape(format!(
            "expected a [C={}, H, W, D] volume, got {:?}",
            model.cfg.in_channels,
            image.shape()
        )));
    }
    let dims = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let starts = [
        window_starts(dims[0], window[0], overlap)?,
        window_starts(dims[1], window[1], overlap)?,
        window_starts(dims[2], window[2], overlap)?,
    ];

    let j = model.cfg.classes;
    let voxels = dims[0] * dims[1] * dims[2];
    let mut sums = vec![0f32; j * voxels];
    let mut counts = vec![0u32; voxels];
    let win_voxels = window[0] * window[1] * window[2];
    for &sh in &starts[0] {
        for &sw in &starts[1] {
            for &sd in &starts[2] {
                let piece = copy_window(image, [sh, sw, sd], window);
                let logits = window_logits(model, &piece)?;
                let ldata = logits.data();
                for i in 0..window[0] {
                    for jj in 0..window[1] {
                        for k in 0..window[2] {
                            let local = (i * window[1] + jj) * window[2] + k;
                            let global =
                                ((sh + i) * dims[1] + sw + jj) * dims[2] + sd + k;
                            for c in 0..j {
                                sums[c * voxels + global] += ldata[c * win_voxels + local];
                            }
                            counts[global] += 1;
                        }
                    }
                }
            }
        }
    }

    for (v, &n) in counts.iter().enumerate() {
        debug_assert!(n > 0, "voxel {v} not covered by any window");
        for c in 0..j {
            sums[c * voxels + v] /= n as f32;
        }
    }
    Ok(argmax_classes(&sums, j, voxels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub dice: DiceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean: DiceReport,
}

/// Element-wise mean of per-class Dice across samples.
pub fn mean_dice_reports(reports: &[DiceReport]) -> DiceReport {
    assert!(!reports.is_empty(), "no reports to average");
    let k = reports[0].per_class.len();
    let mut per_class = vec![0.0; k];
    let mut mean = 0.0;
    for r in reports {
        assert_eq!(r.per_class.len(), k, "mismatched class counts");
        for (acc, &d) in per_class.iter_mut().zip(&r.per_class) {
            *acc += d;
        }
        mean += r.mean;
    }
    let n = reports.len() as f64;
    for d in &mut per_class {
        *d /= n;
    }
    DiceReport {
        per_class,
        mean: mean / n,
    }
}

/// Per-sample and mean Dice of the model over a dataset. Volumes larger
/// than the model input are handled by sliding windows.
pub fn evaluate(
    samples: &[VolumeSample],
    model: &Model<f32>,
    overlap: f64,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(VoxError::usage("no samples to evaluate"));
    }
    let j = model.cfg.classes;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let image = normalize(&s.image);
        let pred = if s.dims == model.cfg.dims {
            full_volume_labels(model, &image)?
        } else {
            sliding_window_infer(model, &image, model.cfg.dims, overlap)?
        };
        rows.push(EvalRow {
            id: s.id.clone(),
            dice: dice_metric(&pred, &s.labels, j)?,
        });
    }
    let mean = mean_dice_reports(&rows.iter().map(|r| r.dice.clone()).collect::<Vec<_>>());
    Ok(EvalSummary { rows, mean })
}

/// Write `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_eval(dir: &Path, stem: &str, summary: &EvalSummary) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let k = summary.mean.per_class.len();
    let cols: Vec<String> = (1..=k).map(|c| format!("dice_c{c}")).collect();
    let mut csv = format!("id,{},mean_dice\n", cols.join(","));
    for row in &summary.rows {
        let vals: Vec<String> = row.dice.per_class.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{},{},{}\n", row.id, vals.join(","), row.dice.mean));
    }
    let vals: Vec<String> = summary.mean.per_class.iter().map(|v| v.to_string()).collect();
    csv.push_str(&format!("mean,{},{}\n", vals.join(","), summary.mean.mean));

    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&csv_path, csv)?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&json_path, json)?;
    Ok((csv_path, json_path))
}
