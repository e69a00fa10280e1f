//! Forward passes. Parameters are leased onto a [`Tape`] per pass, so one
//! model can serve many tapes (training steps, inference windows) without
//! copying state around.

use std::collections::HashMap;

use super::{Model, Stage};
use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};

const LN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.01;

/// Tape-resident copies of the parameters, keyed by name and kept in
/// declaration order (aligned with the model's own parameter order).
pub struct Lease {
    ids: Vec<NodeId>,
    index: HashMap<String, NodeId>,
}

impl Lease {
    /// Node ids in model parameter order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.index.get(name).copied().ok_or_else(|| {
            VoxError::usage(format!("parameter '{name}' is not present on this model"))
        })
    }
}

/// Tapped encoder levels, each shaped (H/P) x (W/P) x (D/P) x E, plus the
/// raw input node so decoders can feed their full-resolution stem.
pub struct EncoderOutput {
    pub levels: Vec<NodeId>,
    pub grid: [usize; 3],
    pub input: NodeId,
}

impl<T: Scalar> Model<T> {
    /// Copy all parameters onto `tape` as leaves; `trainable` marks them for
    /// gradient tracking.
    pub fn lease(&self, tape: &mut Tape<T>, trainable: bool) -> Lease {
        let mut ids = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for p in &self.params {
            let id = tape.leaf(p.value.clone(), trainable);
            ids.push(id);
            index.insert(p.name.clone(), id);
        }
        Lease { ids, index }
    }

    fn linear(&self, tape: &mut Tape<T>, lease: &Lease, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = lease.id(&format!("{prefix}.weight"))?;
        let b = lease.id(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn norm(&self, tape: &mut Tape<T>, lease: &Lease, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = lease.id(&format!("{prefix}.gamma"))?;
        let beta = lease.id(&format!("{prefix}.beta"))?;
        tape.layer_norm(x, gamma, beta, T::from_f64(LN_EPS))
    }

    /// Patch-embedding tokens [1, T, E], before positional embedding and any
    /// attention. Spatially local: each token sees exactly one P-cube.
    pub(crate) fn patch_tokens(
        &self,
        tape: &mut Tape<T>,
        lease: &Lease,
        x: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let want = [
            1,
            cfg.in_channels,
            cfg.dims[0],
            cfg.dims[1],
            cfg.dims[2],
        ];
        if tape.value(x).shape() != want {
            return Err(VoxError::config(format!(
                "input shape {:?} does not match configured {:?}",
                tape.value(x).shape(),
                want
            )));
        }
        let w = lease.id("encoder.patch_embed.weight")?;
        let b = lease.id("encoder.patch_embed.bias")?;
        let y = tape.conv3d(x, w, Some(b), cfg.patch, 0)?;
        let y = tape.permute(y, &[0, 2, 3, 4, 1])?;
        tape.reshape(y, &[1, cfg.tokens(), cfg.embed])
    }

    pub fn encode(&self, tape: &mut Tape<T>, lease: &Lease, x: NodeId) -> Result<EncoderOutput> {
        let cfg = &self.cfg;
        let tok = self.patch_tokens(tape, lease, x)?;
        let pos = lease.id("encoder.pos_embed")?;
        let mut h = tape.add(tok, pos)?;

        let taps = cfg.tap_blocks();
        let grid = cfg.grid();
        let mut levels = Vec::with_capacity(cfg.levels);
        for blk in 0..cfg.depth {
            let pre = format!("encoder.block{blk}");
            let n1 = self.norm(tape, lease, &format!("{pre}.ln1"), h)?;
            let q = self.linear(tape, lease, &format!("{pre}.attn.q"), n1)?;
            let k = self.linear(tape, lease, &format!("{pre}.attn.k"), n1)?;
            let v = self.linear(tape, lease, &format!("{pre}.attn.v"), n1)?;
            let a = tape.attention(q, k, v, cfg.heads)?;
            let o = self.linear(tape, lease, &format!("{pre}.attn.proj"), a)?;
            h = tape.add(h, o)?;

            let n2 = self.norm(tape, lease, &format!("{pre}.ln2"), h)?;
            let f = self.linear(tape, lease, &format!("{pre}.mlp.fc1"), n2)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, lease, &format!("{pre}.mlp.fc2"), f)?;
            h = tape.add(h, f)?;

            if taps.contains(&blk) {
                levels.push(tape.reshape(h, &[grid[0], grid[1], grid[2], cfg.embed])?);
            }
        }
        Ok(EncoderOutput {
            levels,
            grid,
            input: x,
        })
    }

    /// Per-level order logits: average each level over the height and width
    /// token axes, then map depth rows to B-way logits; t_i is (D/P) x B.
    pub fn order_heads(
        &self,
        tape: &mut Tape<T>,
        lease: &Lease,
        enc: &EncoderOutput,
    ) -> Result<Vec<NodeId>> {
        if self.stage != Stage::Pretrain {
            return Err(VoxError::usage(
                "order heads exist only on a pretrain-stage model",
            ));
        }
        self.check_levels(tape, enc)?;
        let mut out = Vec::with_capacity(enc.levels.len());
        for (i, &z) in enc.levels.iter().enumerate() {
            let pooled = tape.mean_axes(z, &[0, 1])?;
            out.push(self.linear(tape, lease, &format!("heads.order.{i}"), pooled)?);
        }
        Ok(out)
    }

    pub fn decode_reconstruct(
        &self,
        tape: &mut Tape<T>,
        lease: &Lease,
        enc: &EncoderOutput,
    ) -> Result<NodeId> {
        if self.stage != Stage::Pretrain {
            return Err(VoxError::usage(
                "the reconstruction head exists only on a pretrain-stage model",
            ));
        }
        let trunk = self.decode_trunk(tape, lease, enc)?;
        let w = lease.id("heads.recon.weight")?;
        let b = lease.id("heads.recon.bias")?;
        tape.conv3d(trunk, w, Some(b), 1, 0)
    }

    pub fn decode_segment(
        &self,
        tape: &mut Tape<T>,
        lease: &Lease,
        enc: &EncoderOutput,
    ) -> Result<NodeId> {
        if self.stage != Stage::Segment {
            return Err(VoxError::usage(
                "the segmentation head exists only on a segment-stage model",
            ));
        }
        let trunk = self.decode_trunk(tape, lease, enc)?;
        let w = lease.id("heads.seg.weight")?;
        let b = lease.id("heads.seg.bias")?;
        tape.conv3d(trunk, w, Some(b), 1, 0)
    }

    fn check_levels(&self, tape: &Tape<T>, enc: &EncoderOutput) -> Result<()> {
        let cfg = &self.cfg;
        if enc.levels.len() != cfg.levels {
            return Err(VoxError::shape(format!(
                "expected {} encoder levels, got {}",
                cfg.levels,
                enc.levels.len()
            )));
        }
        let g = cfg.grid();
        let want = [g[0], g[1], g[2], cfg.embed];
        for (i, &z) in enc.levels.iter().enumerate() {
            if tape.value(z).shape() != want {
                return Err(VoxError::shape(format!(
                    "encoder level {i} has shape {:?}, expected {:?}",
                    tape.value(z).shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    /// Tokens-as-volume view: (gh, gw, gd, E) -> [1, E, gh, gw, gd].
    fn as_grid(&self, tape: &mut Tape<T>, z: NodeId) -> Result<NodeId> {
        let g = self.cfg.grid();
        let v = tape.permute(z, &[3, 0, 1, 2])?;
        tape.reshape(v, &[1, self.cfg.embed, g[0], g[1], g[2]])
    }

    /// Shared decoder: 2x deconv per stage, skip chains from shallower taps,
    /// an input stem at full resolution, and a mixing conv per stage.
    fn decode_trunk(&self, tape: &mut Tape<T>, lease: &Lease, enc: &EncoderOutput) -> Result<NodeId> {
        let cfg = &self.cfg;
        self.check_levels(tape, enc)?;
        let slope = T::from_f64(LEAKY_SLOPE);
        let stages = cfg.stages();

        let mut cur = self.as_grid(tape, *enc.levels.last().expect("levels checked"))?;
        for s in 0..stages {
            let up_w = lease.id(&format!("decoder.up{s}.weight"))?;
            let up_b = lease.id(&format!("decoder.up{s}.bias"))?;
            cur = tape.conv_transpose3d(cur, up_w, Some(up_b), 2, 0)?;
            cur = tape.leaky_relu(cur, slope);
            let mut parts = vec![cur];

            if let Some(tap) = Self::skip_tap(cfg, s) {
                let mut skip = self.as_grid(tape, enc.levels[tap])?;
                for link in 0..=s {
                    let w = lease.id(&format!("decoder.skip{s}.{link}.weight"))?;
                    let b = lease.id(&format!("decoder.skip{s}.{link}.bias"))?;
                    skip = tape.conv_transpose3d(skip, w, Some(b), 2, 0)?;
                    skip = tape.leaky_relu(skip, slope);
                }
                parts.push(skip);
            }
            if s == stages - 1 {
                let w = lease.id("decoder.stem.weight")?;
                let b = lease.id("decoder.stem.bias")?;
                let mut stem = tape.conv3d(enc.input, w, Some(b), 1, 1)?;
                stem = tape.leaky_relu(stem, slope);
                parts.push(stem);
            }

            let cat = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat(&parts, 1)?
            };
            let mix_w = lease.id(&format!("decoder.mix{s}.weight"))?;
            let mix_b = lease.id(&format!("decoder.mix{s}.bias"))?;
            cur = tape.conv3d(cat, mix_w, Some(mix_b), 1, if s == 0 { 1 } else { 0 })?;
            cur = tape.leaky_relu(cur, slope);
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{InitOptions, Model, ModelConfig, Stage};
    use crate::init::Scheme;
    use crate::tensor::tape::Tape;
    use crate::tensor::Tensor;
    use crate::transform::{shuffle_subvolumes, PermutationRecord};

    /// 16^3 config small enough for exact-value tests.
    fn small_cfg(classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            dims: [16, 16, 16],
            patch: 4,
            embed: 16,
            levels: 2,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            classes,
            dec_channels: vec![8, 4],
        }
    }

    /// 8^3 config for finite-difference checks at f64.
    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            dims: [8, 8, 8],
            patch: 2,
            embed: 8,
            levels: 2,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 2,
            dec_channels: vec![4],
        }
    }

    fn rand_volume(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, cfg.in_channels, cfg.dims[0], cfg.dims[1], cfg.dims[2]];
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn encode_desk_scale_shape_law() {
        let cfg = ModelConfig::desk(1, [32, 32, 32], 4);
        let mut m: Model<f32> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m.init_weights(Scheme::KaimingNormal, &InitOptions::default())
            .unwrap();
        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let x = tape.constant(Tensor::full(&[1, 1, 32, 32, 32], 0.1f32));
        let enc = m.encode(&mut tape, &lease, x).unwrap();
        assert_eq!(enc.levels.len(), 4);
        for &z in &enc.levels {
            assert_eq!(tape.value(z).shape(), [4, 4, 4, 64]);
        }
        // order logits are (D/P) x B at every level
        let logits = m.order_heads(&mut tape, &lease, &enc).unwrap();
        assert_eq!(logits.len(), 4);
        for &t in &logits {
            assert_eq!(tape.value(t).shape(), [4, 4]);
        }
    }

    #[test]
    fn encode_rejects_mismatched_input() {
        let m: Model<f32> = Model::new(small_cfg(2), Stage::Pretrain).unwrap();
        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16, 12]));
        assert!(m.encode(&mut tape, &lease, x).is_err());
    }

    #[test]
    fn encode_zero_weights_gives_constant_features() {
        // all weights zero except a nonzero patch-embed bias and norm beta:
        // nothing can distinguish positions, so every tap is constant
        let mut m: Model<f32> = Model::new(small_cfg(2), Stage::Pretrain).unwrap();
        for blk in 0..m.cfg.depth {
            for ln in ["ln1", "ln2"] {
                m.set(
                    &format!("encoder.block{blk}.{ln}.beta"),
                    Tensor::full(&[16], 0.3),
                )
                .unwrap();
            }
        }
        m.set("encoder.patch_embed.bias", Tensor::full(&[16], 0.5))
            .unwrap();
        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let x = tape.constant(rand_volume(&m.cfg, 11).cast::<f32>());
        let enc = m.encode(&mut tape, &lease, x).unwrap();
        for &z in &enc.levels {
            let data = tape.value(z).data();
            let e = m.cfg.embed;
            for (i, &v) in data.iter().enumerate() {
                assert_eq!(v, data[i % e], "channel value varies across positions");
            }
        }
    }

    #[test]
    fn patch_embedding_is_depth_permutation_covariant() {
        let cfg = small_cfg(2);
        let mut m: Model<f64> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m.init_weights(
            Scheme::XavierUniform,
            &InitOptions {
                seed: 21,
                ..InitOptions::default()
            },
        )
        .unwrap();

        let vol = rand_volume(&cfg, 3);
        let rank4 = vol.reshaped(&[1, 16, 16, 16]).unwrap();
        let perm = PermutationRecord::sample(cfg.b(), 9).unwrap();
        let shuffled = shuffle_subvolumes(&rank4, &perm).unwrap();
        let shuffled5 = shuffled.reshaped(&[1, 1, 16, 16, 16]).unwrap();

        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let xo = tape.constant(vol);
        let xs = tape.constant(shuffled5);
        let to = m.patch_tokens(&mut tape, &lease, xo).unwrap();
        let ts = m.patch_tokens(&mut tape, &lease, xs).unwrap();

        // one token row per sub-volume: shuffled tokens at depth slot f equal
        // original tokens at depth perm.order[f], bit for bit
        let g = cfg.grid();
        let (orig, shuf) = (tape.value(to).data(), tape.value(ts).data());
        let e = cfg.embed;
        for h in 0..g[0] {
            for w in 0..g[1] {
                for f in 0..g[2] {
                    let at = |d: usize| ((h * g[1] + w) * g[2] + d) * e;
                    let (a, b) = (at(perm.order[f]), at(f));
                    assert_eq!(orig[a..a + e], shuf[b..b + e], "slot {f}");
                }
            }
        }
    }

    #[test]
    fn order_heads_constant_level_gives_identical_slots() {
        let cfg = small_cfg(2);
        let mut m: Model<f64> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m.init_weights(
            Scheme::KaimingUniform,
            &InitOptions {
                seed: 2,
                ..InitOptions::default()
            },
        )
        .unwrap();
        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let g = cfg.grid();
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16, 16]));
        let levels: Vec<_> = (0..cfg.levels)
            .map(|i| {
                tape.constant(Tensor::full(
                    &[g[0], g[1], g[2], cfg.embed],
                    0.2 + 0.1 * i as f64,
                ))
            })
            .collect();
        let enc = super::EncoderOutput {
            levels,
            grid: g,
            input: x,
        };
        let logits = m.order_heads(&mut tape, &lease, &enc).unwrap();
        for &t in &logits {
            let v = tape.value(t);
            let b = cfg.b();
            for slot in 1..v.shape()[0] {
                assert_eq!(v.data()[slot * b..(slot + 1) * b], v.data()[0..b]);
            }
        }
    }

    #[test]
    fn order_heads_zero_weights_emit_bias() {
        let cfg = small_cfg(2);
        let mut m: Model<f64> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m.set("heads.order.1.bias", Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let x = tape.constant(rand_volume(&cfg, 17));
        let enc = m.encode(&mut tape, &lease, x).unwrap();
        let logits = m.order_heads(&mut tape, &lease, &enc).unwrap();
        let t1 = tape.value(logits[1]);
        for slot in 0..4 {
            assert_eq!(t1.data()[slot * 4..slot * 4 + 4], [1.0, -2.0, 0.5, 3.0]);
        }
        let t0 = tape.value(logits[0]);
        assert!(t0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoders_produce_full_resolution_and_bias_fill() {
        let cfg = small_cfg(3);
        // zero weights: the only signal surviving to the output is the head bias
        let mut m: Model<f32> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m.set("heads.recon.bias", Tensor::full(&[1], 0.25)).unwrap();
        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let x = tape.constant(rand_volume(&cfg, 5).cast::<f32>());
        let enc = m.encode(&mut tape, &lease, x).unwrap();
        let y = m.decode_reconstruct(&mut tape, &lease, &enc).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 1, 16, 16, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));

        let mut seg: Model<f32> = Model::new(cfg.clone(), Stage::Segment).unwrap();
        seg.init_weights(
            Scheme::XavierNormal,
            &InitOptions {
                seed: 8,
                ..InitOptions::default()
            },
        )
        .unwrap();
        let mut tape = Tape::new();
        let lease = seg.lease(&mut tape, false);
        let x = tape.constant(rand_volume(&cfg, 6).cast::<f32>());
        let enc = seg.encode(&mut tape, &lease, x).unwrap();
        let y = seg.decode_segment(&mut tape, &lease, &enc).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 3, 16, 16, 16]);
        // softmax over the class axis is a distribution at every voxel
        let probs = tape.softmax(y, 1).unwrap();
        let v = tape.value(probs);
        let vox = 16 * 16 * 16;
        for i in 0..vox {
            let s: f32 = (0..3).map(|c| v.data()[c * vox + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_class_channels_give_uniform_probabilities() {
        let cfg = small_cfg(2);
        let mut m: Model<f64> = Model::new(cfg.clone(), Stage::Segment).unwrap();
        m.init_weights(
            Scheme::KaimingNormal,
            &InitOptions {
                seed: 31,
                ..InitOptions::default()
            },
        )
        .unwrap();
        // duplicate class 0's head row into class 1 so logits coincide
        let w = m.get("heads.seg.weight").unwrap().clone();
        let c_last = w.shape()[1];
        let mut data = w.data().to_vec();
        let row: Vec<f64> = data[0..c_last].to_vec();
        data[c_last..2 * c_last].copy_from_slice(&row);
        m.set(
            "heads.seg.weight",
            Tensor::from_vec(&[2, c_last, 1, 1, 1], data).unwrap(),
        )
        .unwrap();
        m.set("heads.seg.bias", Tensor::full(&[2], 0.1)).unwrap();

        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, false);
        let x = tape.constant(rand_volume(&cfg, 23));
        let enc = m.encode(&mut tape, &lease, x).unwrap();
        let y = m.decode_segment(&mut tape, &lease, &enc).unwrap();
        let probs = tape.softmax(y, 1).unwrap();
        assert!(tape
            .value(probs)
            .data()
            .iter()
            .all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn heads_respect_stage() {
        let cfg = small_cfg(2);
        let seg: Model<f32> = Model::new(cfg.clone(), Stage::Segment).unwrap();
        let mut tape = Tape::new();
        let lease = seg.lease(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16, 16]));
        let enc = seg.encode(&mut tape, &lease, x).unwrap();
        assert!(seg.order_heads(&mut tape, &lease, &enc).is_err());
        assert!(seg.decode_reconstruct(&mut tape, &lease, &enc).is_err());

        let pre: Model<f32> = Model::new(cfg, Stage::Pretrain).unwrap();
        let mut tape = Tape::new();
        let lease = pre.lease(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16, 16]));
        let enc = pre.encode(&mut tape, &lease, x).unwrap();
        assert!(pre.decode_segment(&mut tape, &lease, &enc).is_err());
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut m: Model<f64> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m.init_weights(
            Scheme::KaimingNormal,
            &InitOptions {
                seed: 3,
                ..InitOptions::default()
            },
        )
        .unwrap();
        let vol = rand_volume(&cfg, 41);
        let target = rand_volume(&cfg, 42);

        let loss_of = |model: &Model<f64>| -> f64 {
            let mut tape = Tape::new();
            let lease = model.lease(&mut tape, false);
            let x = tape.constant(vol.clone());
            let t = tape.constant(target.clone());
            let enc = model.encode(&mut tape, &lease, x).unwrap();
            let y = model.decode_reconstruct(&mut tape, &lease, &enc).unwrap();
            let d = tape.sub(y, t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.mean(sq);
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let lease = m.lease(&mut tape, true);
        let x = tape.constant(vol.clone());
        let t = tape.constant(target.clone());
        let enc = m.encode(&mut tape, &lease, x).unwrap();
        let y = m.decode_reconstruct(&mut tape, &lease, &enc).unwrap();
        let d = tape.sub(y, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        for name in ["encoder.patch_embed.weight", "decoder.stem.weight"] {
            let analytic = grads.get(lease.id(name).unwrap()).unwrap().clone();
            let base = m.get(name).unwrap().clone();
            for &j in &[0usize, 3, 5] {
                let mut plus = base.clone();
                plus.data_mut()[j] += h;
                m.set(name, plus).unwrap();
                let up = loss_of(&m);
                let mut minus = base.clone();
                minus.data_mut()[j] -= h;
                m.set(name, minus).unwrap();
                let down = loss_of(&m);
                m.set(name, base.clone()).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-8,
                    "{name}[{j}]: analytic {a}, numeric {numeric}"
                );
            }
        }
    }
}
