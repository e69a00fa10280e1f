//! Hybrid encoder-decoder: a 3D patch-embedding transformer encoder with m
//! tapped levels, a transposed-conv decoder with per-level skip chains plus
//! a full-resolution input stem, and task heads (per-level order
//! classifiers + reconstruction for pretraining, segmentation for
//! fine-tuning).

mod forward;

pub use forward::{EncoderOutput, Lease};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Result, VoxError};
use crate::init::{self, InitSpec, LayerKind, Scheme};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Input spatial extents (H, W, D).
    pub dims: [usize; 3],
    /// Cubic token patch size; must be a power of two >= 2.
    pub patch: usize,
    /// Embedding width, shared by all tapped levels.
    pub embed: usize,
    /// Number of tapped encoder levels m.
    pub levels: usize,
    /// Transformer block count.
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the block MLPs, as a multiple of `embed`.
    pub mlp_ratio: usize,
    /// Segmentation classes J (background included).
    pub classes: usize,
    /// Decoder widths, one per upsampling stage (log2(patch) stages,
    /// deepest first).
    pub dec_channels: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale defaults for a given input geometry.
    pub fn desk(in_channels: usize, dims: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            in_channels,
            dims,
            patch: 8,
            embed: 64,
            levels: 4,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            classes,
            dec_channels: vec![32, 16, 8],
        }
    }

    /// Upsampling stage count (one 2x stage per factor of two in `patch`).
    pub fn stages(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    /// Token-grid extents (H/P, W/P, D/P).
    pub fn grid(&self) -> [usize; 3] {
        [
            self.dims[0] / self.patch,
            self.dims[1] / self.patch,
            self.dims[2] / self.patch,
        ]
    }

    pub fn tokens(&self) -> usize {
        let g = self.grid();
        g[0] * g[1] * g[2]
    }

    /// Sub-volume count for the shuffle task: B = D / P along depth.
    pub fn b(&self) -> usize {
        self.dims[2] / self.patch
    }

    /// Block indices (0-based) whose outputs are tapped, evenly spaced and
    /// ending at the last block.
    pub fn tap_blocks(&self) -> Vec<usize> {
        (1..=self.levels)
            .map(|i| (i * self.depth).div_ceil(self.levels) - 1)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.classes < 2 {
            return Err(VoxError::config(format!(
                "need in_channels >= 1 and classes >= 2, got {} and {}",
                self.in_channels, self.classes
            )));
        }
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return Err(VoxError::config(format!(
                "token patch must be a power of two >= 2, got {}",
                self.patch
            )));
        }
        for (axis, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % self.patch != 0 {
                return Err(VoxError::config(format!(
                    "input dim {d} (axis {axis}) not divisible by patch {}",
                    self.patch
                )));
            }
        }
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(VoxError::config(format!(
                "embed dim {} must be divisible by heads {}",
                self.embed, self.heads
            )));
        }
        if self.levels == 0 || self.depth == 0 || self.levels > self.depth {
            return Err(VoxError::config(format!(
                "need 1 <= levels <= depth, got levels {} depth {}",
                self.levels, self.depth
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(VoxError::config("mlp_ratio must be >= 1"));
        }
        if self.dec_channels.len() != self.stages() || self.dec_channels.contains(&0) {
            return Err(VoxError::config(format!(
                "dec_channels {:?} must list {} positive stage widths",
                self.dec_channels,
                self.stages()
            )));
        }
        Ok(())
    }
}

/// Which task heads exist on the model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Stage {
    /// Order-prediction + reconstruction heads.
    Pretrain,
    /// Segmentation head.
    Segment,
}

/// How a parameter is initialized and consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Layout (c_out, c_in, k0, k1, k2).
    ConvWeight {
        c_in: usize,
        c_out: usize,
        k: [usize; 3],
    },
    /// Layout (c_in, c_out, k0, k1, k2).
    DeconvWeight {
        c_in: usize,
        c_out: usize,
        k: [usize; 3],
    },
    /// Layout (c_in, c_out); applied as x @ W.
    LinearWeight { c_in: usize, c_out: usize },
    Bias,
    NormGamma,
    NormBeta,
    PosEmbed,
}

pub(crate) struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub(crate) params: Vec<Param<T>>,
    pub(crate) index: HashMap<String, usize>,
}

/// Seeding and shared knobs for [`Model::init_weights`].
#[derive(Clone, Copy, Debug)]
pub struct InitOptions {
    pub gain: f64,
    pub trunc_sigma: f64,
    pub paper_literal_xavier: bool,
    pub seed: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            gain: 1.0,
            trunc_sigma: 0.02,
            paper_literal_xavier: false,
            seed: 0,
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model {
            cfg,
            stage,
            params: Vec::new(),
            index: HashMap::new(),
        };
        model.build_params();
        Ok(model)
    }

    fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind) {
        debug_assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value: Tensor::zeros(shape),
            kind,
        });
    }

    fn add_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: [usize; 3]) {
        self.add(
            &format!("{name}.weight"),
            &[c_out, c_in, k[0], k[1], k[2]],
            ParamKind::ConvWeight { c_in, c_out, k },
        );
        self.add(&format!("{name}.bias"), &[c_out], ParamKind::Bias);
    }

    fn add_deconv(&mut self, name: &str, c_in: usize, c_out: usize, k: [usize; 3]) {
        self.add(
            &format!("{name}.weight"),
            &[c_in, c_out, k[0], k[1], k[2]],
            ParamKind::DeconvWeight { c_in, c_out, k },
        );
        self.add(&format!("{name}.bias"), &[c_out], ParamKind::Bias);
    }

    fn add_linear(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.add(
            &format!("{name}.weight"),
            &[c_in, c_out],
            ParamKind::LinearWeight { c_in, c_out },
        );
        self.add(&format!("{name}.bias"), &[c_out], ParamKind::Bias);
    }

    fn add_norm(&mut self, name: &str, width: usize) {
        self.add(&format!("{name}.gamma"), &[width], ParamKind::NormGamma);
        self.add(&format!("{name}.beta"), &[width], ParamKind::NormBeta);
    }

    fn build_params(&mut self) {
        let cfg = self.cfg.clone();
        let (e, p) = (cfg.embed, cfg.patch);

        self.add_conv("encoder.patch_embed", cfg.in_channels, e, [p, p, p]);
        self.add(
            "encoder.pos_embed",
            &[1, cfg.tokens(), e],
            ParamKind::PosEmbed,
        );
        for b in 0..cfg.depth {
            let pre = format!("encoder.block{b}");
            self.add_norm(&format!("{pre}.ln1"), e);
            for proj in ["q", "k", "v", "proj"] {
                self.add_linear(&format!("{pre}.attn.{proj}"), e, e);
            }
            self.add_norm(&format!("{pre}.ln2"), e);
            self.add_linear(&format!("{pre}.mlp.fc1"), e, e * cfg.mlp_ratio);
            self.add_linear(&format!("{pre}.mlp.fc2"), e * cfg.mlp_ratio, e);
        }

        // decoder trunk: one 2x deconv per stage, skip chains from shallower
        // taps, an input stem at full resolution, and a mixing conv per stage
        let stages = cfg.stages();
        let mut prev = e;
        for s in 0..stages {
            let c = cfg.dec_channels[s];
            self.add_deconv(&format!("decoder.up{s}"), prev, c, [2, 2, 2]);
            let mut mix_in = 2 * c;
            if Self::skip_tap(&cfg, s).is_some() {
                self.add_deconv(&format!("decoder.skip{s}.0"), e, c, [2, 2, 2]);
                for link in 1..=s {
                    self.add_deconv(&format!("decoder.skip{s}.{link}"), c, c, [2, 2, 2]);
                }
            } else {
                mix_in -= c;
            }
            if s == stages - 1 {
                self.add_conv("decoder.stem", cfg.in_channels, c, [3, 3, 3]);
                mix_in += c;
            }
            let mk = if s == 0 { [3, 3, 3] } else { [1, 1, 1] };
            self.add_conv(&format!("decoder.mix{s}"), mix_in, c, mk);
            prev = c;
        }

        let c_last = *cfg.dec_channels.last().unwrap();
        match self.stage {
            Stage::Pretrain => {
                for i in 0..cfg.levels {
                    self.add_linear(&format!("heads.order.{i}"), e, cfg.b());
                }
                self.add_conv("heads.recon", c_last, cfg.in_channels, [1, 1, 1]);
            }
            Stage::Segment => {
                self.add_conv("heads.seg", c_last, cfg.classes, [1, 1, 1]);
            }
        }
    }

    /// Tap index feeding stage `s`'s skip chain (deepest tap is the trunk
    /// root, so stage 0 uses the second-deepest).
    pub(crate) fn skip_tap(cfg: &ModelConfig, s: usize) -> Option<usize> {
        (cfg.levels as isize - 2 - s as isize).try_into().ok()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Names of the transferable trunk (everything except task heads).
    pub fn trunk_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| !n.starts_with("heads."))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| VoxError::config(format!("unknown parameter '{name}'")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(VoxError::shape(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Draw every weight per `scheme`; norms go to (gamma=1, beta=0), biases
    /// to zero, positional embeddings to trunc-normal(0.02). Per-parameter
    /// sub-seeds come from one ChaCha8 stream over `opts.seed`, so the result
    /// is deterministic and independent of tensor sizes.
    pub fn init_weights(&mut self, scheme: Scheme, opts: &InitOptions) -> Result<()> {
        use rand::{Rng, SeedableRng};
        let mut master = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        for p in &mut self.params {
            let sub_seed: u64 = master.gen();
            let shape = p.value.shape().to_vec();
            p.value = match p.kind {
                ParamKind::Bias | ParamKind::NormBeta => Tensor::zeros(&shape),
                ParamKind::NormGamma => Tensor::ones(&shape),
                ParamKind::PosEmbed => {
                    let spec = InitSpec::new(Scheme::TruncNormal, 1, 1)
                        .with_trunc_sigma(0.02)
                        .with_seed(sub_seed);
                    init::trunc_normal(&spec, &shape)?
                }
                ParamKind::ConvWeight { c_in, c_out, k }
                | ParamKind::DeconvWeight { c_in, c_out, k } => {
                    let (fan_in, fan_out) = init::conv_fans(c_in, c_out, k);
                    let spec = InitSpec {
                        scheme,
                        gain: opts.gain,
                        fan_in: if scheme == Scheme::UnetrDefault { c_in } else { fan_in },
                        fan_out,
                        kernel_sizes: Some(k),
                        trunc_sigma: opts.trunc_sigma,
                        paper_literal_xavier: opts.paper_literal_xavier,
                        seed: sub_seed,
                    };
                    init::sample(&spec, &shape, LayerKind::Conv)?
                }
                ParamKind::LinearWeight { c_in, c_out } => {
                    let spec = InitSpec {
                        scheme,
                        gain: opts.gain,
                        fan_in: c_in,
                        fan_out: c_out,
                        kernel_sizes: None,
                        trunc_sigma: opts.trunc_sigma,
                        paper_literal_xavier: opts.paper_literal_xavier,
                        seed: sub_seed,
                    };
                    init::sample(&spec, &shape, LayerKind::Linear)?
                }
            };
        }
        Ok(())
    }

    /// Flat views for the optimizer: parallel (names, tensors) slices.
    pub fn param_slices(&mut self) -> (Vec<&str>, Vec<&mut Tensor<T>>) {
        let mut names = Vec::with_capacity(self.params.len());
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in &mut self.params {
            names.push(p.name.as_str());
            tensors.push(&mut p.value);
        }
        (names, tensors)
    }
}
