//! Input transformation for the self-supervised pretext tasks: partition a
//! volume into B equal-depth sub-volumes, shuffle them under a recorded
//! permutation, and block-mask the result under a recorded grid.
//!
//! Volumes are (C, H, W, D) with depth last, so sub-volume slabs are
//! contiguous runs along the innermost axis.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A recorded depth-shuffle: output slot `f` holds input sub-volume
/// `order[f]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationRecord {
    pub b: usize,
    pub order: Vec<usize>,
    pub seed: u64,
}

impl PermutationRecord {
    pub fn identity(b: usize) -> Self {
        PermutationRecord {
            b,
            order: (0..b).collect(),
            seed: 0,
        }
    }

    /// Uniform draw over all B! orders (Fisher–Yates).
    pub fn sample(b: usize, seed: u64) -> Result<Self> {
        if b == 0 {
            return Err(VoxError::config("cannot shuffle zero sub-volumes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = sample_order(&mut rng, b);
        Ok(PermutationRecord { b, order, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.order.len() != self.b {
            return Err(VoxError::config(format!(
                "permutation has {} entries for B={}",
                self.order.len(),
                self.b
            )));
        }
        let mut seen = vec![false; self.b];
        for &o in &self.order {
            if o >= self.b || seen[o] {
                return Err(VoxError::config(format!(
                    "order {:?} is not a bijection on 0..{}",
                    self.order, self.b
                )));
            }
            seen[o] = true;
        }
        Ok(())
    }
}

pub(crate) fn sample_order(rng: &mut ChaCha8Rng, b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..b).collect();
    for i in (1..b).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// A recorded block mask over the patch grid of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub ratio: f64,
    pub patch: [usize; 3],
    pub grid_dims: [usize; 3],
    /// Row-major over `grid_dims`; true = patch is masked.
    pub grid: Vec<bool>,
    pub fill_value: f64,
}

impl MaskRecord {
    pub fn masked_patches(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn total_patches(&self) -> usize {
        self.grid.len()
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.grid_dims.iter().product();
        if total != self.grid.len() {
            return Err(VoxError::config(format!(
                "mask grid has {} cells for dims {:?}",
                self.grid.len(),
                self.grid_dims
            )));
        }
        if self.masked_patches() != round_half_up(self.ratio * total as f64) {
            return Err(VoxError::config(format!(
                "mask count {} does not match round({}·{})",
                self.masked_patches(),
                self.ratio,
                total
            )));
        }
        Ok(())
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

fn depth_of(x_shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if x_shape.len() != 4 {
        return Err(VoxError::shape(format!(
            "expected a (C, H, W, D) volume, got shape {x_shape:?}"
        )));
    }
    Ok((x_shape[0], x_shape[1], x_shape[2], x_shape[3]))
}

/// Move `depth_axis` to the last position, keeping the other axes in order.
/// This is the axis normalization applied before any depth partitioning.
pub fn rearrange_depth_last<T: Scalar>(x: &Tensor<T>, depth_axis: usize) -> Result<Tensor<T>> {
    if depth_axis >= x.rank() {
        return Err(VoxError::shape(format!(
            "depth axis {depth_axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if depth_axis == x.rank() - 1 {
        return Ok(x.clone());
    }
    let mut perm: Vec<usize> = (0..x.rank()).filter(|&a| a != depth_axis).collect();
    perm.push(depth_axis);
    x.permuted(&perm)
}

/// Split along depth into B equal slabs; slab `j` holds slices
/// [j·D/B, (j+1)·D/B).
pub fn partition_depth<T: Scalar>(x: &Tensor<T>, b: usize) -> Result<Vec<Tensor<T>>> {
    let (c, h, w, d) = depth_of(x.shape())?;
    if b == 0 || d % b != 0 {
        return Err(VoxError::config(format!(
            "depth {d} does not divide into {b} sub-volumes"
        )));
    }
    let thick = d / b;
    let rows = c * h * w;
    let src = x.data();
    let mut out = Vec::with_capacity(b);
    for j in 0..b {
        let mut data = vec![T::zero(); rows * thick];
        for r in 0..rows {
            let s = r * d + j * thick;
            data[r * thick..(r + 1) * thick].copy_from_slice(&src[s..s + thick]);
        }
        out.push(Tensor::from_vec(&[c, h, w, thick], data)?);
    }
    Ok(out)
}

/// Inverse of [`partition_depth`]: depth-concatenate equal slabs.
pub fn concat_depth<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(VoxError::shape("cannot concatenate zero sub-volumes"));
    }
    let (c, h, w, thick) = depth_of(parts[0].shape())?;
    for p in parts {
        if p.shape() != parts[0].shape() {
            return Err(VoxError::shape(format!(
                "sub-volume shapes differ: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
    }
    let b = parts.len();
    let d = thick * b;
    let rows = c * h * w;
    let mut data = vec![T::zero(); rows * d];
    for (j, p) in parts.iter().enumerate() {
        let src = p.data();
        for r in 0..rows {
            let dst = r * d + j * thick;
            data[dst..dst + thick].copy_from_slice(&src[r * thick..(r + 1) * thick]);
        }
    }
    Tensor::from_vec(&[c, h, w, d], data)
}

/// Reorder depth slabs: output slot `f` holds input sub-volume `order[f]`.
pub fn shuffle_subvolumes<T: Scalar>(x: &Tensor<T>, perm: &PermutationRecord) -> Result<Tensor<T>> {
    perm.validate()?;
    let parts = partition_depth(x, perm.b)?;
    let picked: Vec<Tensor<T>> = perm.order.iter().map(|&o| parts[o].clone()).collect();
    concat_depth(&picked)
}

/// Exact inverse of [`shuffle_subvolumes`] under the same record.
pub fn unshuffle<T: Scalar>(x: &Tensor<T>, perm: &PermutationRecord) -> Result<Tensor<T>> {
    perm.validate()?;
    let parts = partition_depth(x, perm.b)?;
    let mut restored = vec![None; perm.b];
    for (f, &o) in perm.order.iter().enumerate() {
        restored[o] = Some(parts[f].clone());
    }
    let parts: Vec<Tensor<T>> = restored.into_iter().map(|p| p.unwrap()).collect();
    concat_depth(&parts)
}

fn choose_grid(rng: &mut ChaCha8Rng, total: usize, k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..k.min(total.saturating_sub(1)) {
        let j = rng.gen_range(i..total);
        idx.swap(i, j);
    }
    let mut grid = vec![false; total];
    for &i in &idx[..k] {
        grid[i] = true;
    }
    grid
}

fn mask_with_grid<T: Scalar>(
    x: &Tensor<T>,
    patch: [usize; 3],
    grid_dims: [usize; 3],
    grid: &[bool],
    fill: T,
) -> Tensor<T> {
    let (c, h, w, d) = depth_of(x.shape()).expect("validated by caller");
    let mut out = x.clone();
    let data = out.data_mut();
    for (cell, &masked) in grid.iter().enumerate() {
        if !masked {
            continue;
        }
        let gd = cell % grid_dims[2];
        let gw = (cell / grid_dims[2]) % grid_dims[1];
        let gh = cell / (grid_dims[2] * grid_dims[1]);
        let (h0, w0, d0) = (gh * patch[0], gw * patch[1], gd * patch[2]);
        for ch in 0..c {
            for ph in 0..patch[0] {
                for pw in 0..patch[1] {
                    let row = ((ch * h + h0 + ph) * w + w0 + pw) * d + d0;
                    for v in &mut data[row..row + patch[2]] {
                        *v = fill;
                    }
                }
            }
        }
    }
    out
}

/// Block-mask `x`: exactly round(ratio·P) of the P patches become
/// `fill_value` across every channel; all other voxels stay bit-identical.
pub fn apply_mask<T: Scalar>(
    x: &Tensor<T>,
    ratio: f64,
    patch: [usize; 3],
    fill_value: f64,
    seed: u64,
) -> Result<(Tensor<T>, MaskRecord)> {
    let (_, h, w, d) = depth_of(x.shape())?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(VoxError::config(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    if patch.contains(&0) || h % patch[0] != 0 || w % patch[1] != 0 || d % patch[2] != 0 {
        return Err(VoxError::config(format!(
            "mask patch {patch:?} does not divide spatial dims ({h}, {w}, {d})"
        )));
    }
    let grid_dims = [h / patch[0], w / patch[1], d / patch[2]];
    let total: usize = grid_dims.iter().product();
    let k = round_half_up(ratio * total as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = choose_grid(&mut rng, total, k);
    let masked = mask_with_grid(x, patch, grid_dims, &grid, T::from_f64(fill_value));
    Ok((
        masked,
        MaskRecord {
            ratio,
            patch,
            grid_dims,
            grid,
            fill_value,
        },
    ))
}

/// Knobs for [`make_masked_shuffled`].
#[derive(Clone, Debug)]
pub struct TransformConfig {
    /// Sub-volume count B = D / P_{d} of the deepest tap.
    pub b: usize,
    pub mask_ratio: f64,
    pub mask_patch: [usize; 3],
    pub fill_value: f64,
    pub seed: u64,
}

/// Partition → shuffle → mask, returning the masked input X'', both records,
/// and the shuffled-but-unmasked X' (the reconstruction target).
pub fn make_masked_shuffled<T: Scalar>(
    x: &Tensor<T>,
    cfg: &TransformConfig,
) -> Result<(Tensor<T>, PermutationRecord, MaskRecord, Tensor<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let perm = PermutationRecord {
        b: cfg.b,
        order: sample_order(&mut rng, cfg.b),
        seed: cfg.seed,
    };
    let shuffled = shuffle_subvolumes(x, &perm)?;

    let (_, h, w, d) = depth_of(x.shape())?;
    if !(0.0..=1.0).contains(&cfg.mask_ratio) {
        return Err(VoxError::config(format!(
            "mask ratio must lie in [0, 1], got {}",
            cfg.mask_ratio
        )));
    }
    let p = cfg.mask_patch;
    if p.contains(&0) || h % p[0] != 0 || w % p[1] != 0 || d % p[2] != 0 {
        return Err(VoxError::config(format!(
            "mask patch {p:?} does not divide spatial dims ({h}, {w}, {d})"
        )));
    }
    let grid_dims = [h / p[0], w / p[1], d / p[2]];
    let total: usize = grid_dims.iter().product();
    let k = round_half_up(cfg.mask_ratio * total as f64);
    let grid = choose_grid(&mut rng, total, k);
    let masked = mask_with_grid(&shuffled, p, grid_dims, &grid, T::from_f64(cfg.fill_value));
    let record = MaskRecord {
        ratio: cfg.mask_ratio,
        patch: p,
        grid_dims,
        grid,
        fill_value: cfg.fill_value,
    };
    Ok((masked, perm, record, shuffled))
}
