//! Acceptance gate: one test per numbered release criterion.
//!
//! Every test prints `ACCEPTANCE criterion N (<label>): PASS` (or FAIL) so a
//! `--nocapture` run yields one line per criterion; under the default capture
//! the harness's own per-test ok/FAILED lines carry the same information.
//!
//! Criteria 5 and 9 share one expensive training comparison through a
//! `OnceLock`; whichever test runs first pays for it.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use voxinit::dataio::{generate_dataset, read_volume, write_volume, SynthSpec, VolumeSample};
use voxinit::error::VoxError;
use voxinit::init::{self, InitSpec, LayerKind, Scheme};
use voxinit::model::{InitOptions, Model, ModelConfig, Stage};
use voxinit::objectives::{
    dice_ce_from_logits, dice_ce_loss, one_hot, order_loss_node, order_prediction_loss,
    recon_loss_node, reconstruction_loss, DiceDenominator,
};
use voxinit::pipeline::{
    load_checkpoint, run_ablations, run_initialization_comparison, save_checkpoint, Checkpoint,
    ComparisonOutcome, RunConfig,
};
use voxinit::pipeline::{sliding_window_infer, window_starts};
use voxinit::tensor::tape::{NodeId, Tape};
use voxinit::transform::{
    apply_mask, make_masked_shuffled, shuffle_subvolumes, unshuffle, PermutationRecord,
    TransformConfig,
};
use voxinit::Tensor;

fn criterion<F>(n: usize, label: &str, body: F)
where
    F: FnOnce() -> String,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(detail) => println!("ACCEPTANCE criterion {n} ({label}): PASS{detail}"),
        Err(e) => {
            println!("ACCEPTANCE criterion {n} ({label}): FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

/// Deterministic value sequence in [lo, hi), decorrelated by `salt`.
fn pseudo(n: usize, salt: u64, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h = (i as u64)
                .wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15))
                .wrapping_mul(0xbf58476d1ce4e5b9);
            let u = ((h >> 16) % 100_000) as f64 / 100_000.0;
            lo + (hi - lo) * u
        })
        .collect()
}

fn tensor64(shape: &[usize], salt: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, pseudo(n, salt, lo, hi)).expect("fixture tensor")
}

fn tensor32(shape: &[usize], salt: u64, lo: f64, hi: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = pseudo(n, salt, lo, hi).into_iter().map(|v| v as f32).collect();
    Tensor::from_vec(shape, data).expect("fixture tensor")
}

// ---------------------------------------------------------------------------
// criterion 1: gradients

/// One composite graph touching every differentiable tape operation.
/// Leaf order: conv_in, conv_w, conv_b, deconv_w, ln_gamma, ln_beta,
/// attn_q, attn_k, attn_v, mm_a, mm_b.
fn all_ops_loss(tape: &mut Tape<f64>, ids: &[NodeId]) -> NodeId {
    let (x, w, cb, wt) = (ids[0], ids[1], ids[2], ids[3]);
    let (g, be) = (ids[4], ids[5]);
    let (q, k, v) = (ids[6], ids[7], ids[8]);
    let (ma, mb) = (ids[9], ids[10]);

    let c1 = tape.conv3d(x, w, Some(cb), 2, 0).unwrap();
    let c2 = tape.gelu(c1);
    let c3 = tape.conv_transpose3d(c2, wt, None, 2, 0).unwrap();
    let c4 = tape.add(c3, x).unwrap();
    let c5 = tape.leaky_relu(c4, 0.1);
    let c6 = tape.mul(c5, x).unwrap();
    let c7 = tape.sub(c6, c3).unwrap();
    let sq = tape.mul(c7, c7).unwrap();
    let den = tape.add_scalar(sq, 1.0);
    let c8 = tape.div(c5, den).unwrap();
    let c9 = tape.permute(c8, &[0, 2, 1, 3, 4]).unwrap();
    let vol_term = tape.mean(c9);

    let ln = tape.layer_norm(q, g, be, 1e-5).unwrap();
    let at = tape.attention(ln, k, v, 2).unwrap();
    let sm = tape.softmax(at, 2).unwrap();
    let ls = tape.log_softmax(at, 2).unwrap();
    let smsq = tape.mul(sm, sm).unwrap();
    let pos = tape.add_scalar(smsq, 0.5);
    let lg = tape.log_clamped(pos, 1e-9).unwrap();
    let sa = tape.sum_axes(sm, &[0]).unwrap();
    let me = tape.mean_axes(ls, &[1]).unwrap();
    let mm = tape.matmul(ma, mb).unwrap();
    let f1 = tape.reshape(sa, &[24]).unwrap();
    let f2 = tape.reshape(me, &[12]).unwrap();
    let f3 = tape.reshape(mm, &[6]).unwrap();
    let f4 = tape.reshape(lg, &[48]).unwrap();
    let cc = tape.concat(&[f1, f2, f3, f4], 0).unwrap();
    let flat_term = tape.sum(cc);

    let scaled = tape.scale(flat_term, 0.3);
    let negated = tape.neg(vol_term);
    tape.sub(scaled, negated).unwrap()
}

fn all_ops_leaves() -> Vec<(&'static str, Tensor<f64>)> {
    vec![
        ("conv_in", tensor64(&[1, 2, 4, 4, 4], 3, -0.8, 0.8)),
        ("conv_w", tensor64(&[3, 2, 2, 2, 2], 5, -0.5, 0.5)),
        ("conv_b", tensor64(&[3], 7, -0.3, 0.3)),
        ("deconv_w", tensor64(&[3, 2, 2, 2, 2], 11, -0.5, 0.5)),
        ("ln_gamma", tensor64(&[6], 13, 0.6, 1.4)),
        ("ln_beta", tensor64(&[6], 17, -0.3, 0.3)),
        ("attn_q", tensor64(&[2, 4, 6], 19, -0.7, 0.7)),
        ("attn_k", tensor64(&[2, 4, 6], 23, -0.7, 0.7)),
        ("attn_v", tensor64(&[2, 4, 6], 29, -0.7, 0.7)),
        ("mm_a", tensor64(&[3, 4], 31, -0.6, 0.6)),
        ("mm_b", tensor64(&[4, 2], 37, -0.6, 0.6)),
    ]
}

struct FdStats {
    checked: usize,
    max_rel: f64,
}

/// Central-difference check with step-size retreat. A perturbation can push
/// some pre-activation across the leaky-ReLU kink, corrupting the quotient;
/// that artifact shrinks with the step while a genuine gradient defect stays
/// put, so a coordinate passes only if some step agrees with the analytic
/// value.
fn check_grad(
    what: &str,
    analytic: f64,
    h0: f64,
    mut fd_at: impl FnMut(f64) -> f64,
    stats: &mut FdStats,
) {
    let mut h = h0;
    let mut last = (f64::NAN, f64::INFINITY);
    for _ in 0..3 {
        let fd = fd_at(h);
        let diff = (analytic - fd).abs();
        let scale = analytic.abs().max(fd.abs());
        if diff <= 1e-7 || diff <= 1e-4 * scale {
            if scale > 1e-7 {
                stats.max_rel = stats.max_rel.max(diff / scale);
            }
            stats.checked += 1;
            return;
        }
        last = (fd, diff);
        h /= 8.0;
    }
    panic!(
        "{what}: gradient {analytic} vs central difference {} (diff {})",
        last.0, last.1
    );
}

fn check_all_ops_graph(stats: &mut FdStats) {
    let leaves = all_ops_leaves();
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let loss = all_ops_loss(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let l = all_ops_loss(&mut tape, &ids);
        tape.value(l).item()
    };

    let base: Vec<Tensor<f64>> = leaves.iter().map(|(_, t)| t.clone()).collect();
    for (li, (name, t)) in leaves.iter().enumerate() {
        let g = grads.get(ids[li]).unwrap_or_else(|| panic!("no gradient for {name}"));
        let n = t.numel();
        for j in (0..n).step_by((n / 8).max(1)) {
            let v = t.data()[j];
            check_grad(
                &format!("{name}[{j}]"),
                g.data()[j],
                1e-5 * v.abs().max(1.0),
                |h| {
                    let mut plus = base.clone();
                    plus[li].data_mut()[j] = v + h;
                    let mut minus = base.clone();
                    minus[li].data_mut()[j] = v - h;
                    (eval(&plus) - eval(&minus)) / (2.0 * h)
                },
                stats,
            );
        }
    }
}

fn fd_model_params(
    model: &mut Model<f64>,
    loss_of: &dyn Fn(&Model<f64>) -> f64,
    grad_of: &dyn Fn(&str) -> f64,
    coords_per_tensor: usize,
    stats: &mut FdStats,
) {
    let names: Vec<String> = model.names().iter().map(|s| s.to_string()).collect();
    for name in names {
        let orig = model.get(&name).expect("named parameter").clone();
        let n = orig.numel();
        for c in 0..coords_per_tensor.min(n) {
            let j = c * (n / coords_per_tensor.min(n)).max(1);
            let v = orig.data()[j];
            check_grad(
                &format!("{name}[{j}]"),
                grad_of(&format!("{name}#{j}")),
                1e-5 * v.abs().max(1.0),
                |h| {
                    let mut probe = orig.clone();
                    probe.data_mut()[j] = v + h;
                    model.set(&name, probe).unwrap();
                    let fp = loss_of(model);
                    let mut probe = orig.clone();
                    probe.data_mut()[j] = v - h;
                    model.set(&name, probe).unwrap();
                    let fm = loss_of(model);
                    model.set(&name, orig.clone()).unwrap();
                    (fp - fm) / (2.0 * h)
                },
                stats,
            );
        }
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    criterion(1, "gradient suite", || {
        let started = Instant::now();
        let mut stats = FdStats { checked: 0, max_rel: 0.0 };

        check_all_ops_graph(&mut stats);

        // Full training graphs on a miniature geometry, both stages.
        let cfg = ModelConfig {
            in_channels: 1,
            dims: [8, 8, 8],
            patch: 4,
            embed: 8,
            levels: 2,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 3,
            dec_channels: vec![4, 4],
        };
        let image = tensor64(&[1, 8, 8, 8], 43, 0.0, 1.0);
        let tcfg = TransformConfig {
            b: 2,
            mask_ratio: 0.4,
            mask_patch: [2, 2, 2],
            fill_value: 0.25,
            seed: 9,
        };
        let (masked, perm, _, target) = make_masked_shuffled(&image, &tcfg).unwrap();
        let masked5 = masked.reshaped(&[1, 1, 8, 8, 8]).unwrap();
        let target5 = target.reshaped(&[1, 1, 8, 8, 8]).unwrap();

        let pretrain_loss = |m: &Model<f64>| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let lease = m.lease(&mut tape, false);
            let x = tape.constant(masked5.clone());
            let t = tape.constant(target5.clone());
            let enc = m.encode(&mut tape, &lease, x).unwrap();
            let logits = m.order_heads(&mut tape, &lease, &enc).unwrap();
            let (cls, _) = order_loss_node(&mut tape, &logits, &perm).unwrap();
            let pred = m.decode_reconstruct(&mut tape, &lease, &enc).unwrap();
            let rec = recon_loss_node(&mut tape, pred, t).unwrap();
            let total = tape.add(cls, rec).unwrap();
            tape.value(total).item()
        };

        let mut m1: Model<f64> = Model::new(cfg.clone(), Stage::Pretrain).unwrap();
        m1.init_weights(
            Scheme::UnetrDefault,
            &InitOptions { seed: 21, ..Default::default() },
        )
        .unwrap();
        let (grad_names, grad_values) = {
            let mut tape: Tape<f64> = Tape::new();
            let lease = m1.lease(&mut tape, true);
            let x = tape.constant(masked5.clone());
            let t = tape.constant(target5.clone());
            let enc = m1.encode(&mut tape, &lease, x).unwrap();
            let logits = m1.order_heads(&mut tape, &lease, &enc).unwrap();
            let (cls, _) = order_loss_node(&mut tape, &logits, &perm).unwrap();
            let pred = m1.decode_reconstruct(&mut tape, &lease, &enc).unwrap();
            let rec = recon_loss_node(&mut tape, pred, t).unwrap();
            let total = tape.add(cls, rec).unwrap();
            let grads = tape.backward(total).unwrap();
            let names: Vec<String> = m1.names().iter().map(|s| s.to_string()).collect();
            let values: Vec<Tensor<f64>> = names
                .iter()
                .map(|n| {
                    grads
                        .get(lease.id(n).unwrap())
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(m1.get(n).unwrap().shape()))
                })
                .collect();
            (names, values)
        };
        let grad_of = |key: &str| -> f64 {
            let (name, j) = key.split_once('#').unwrap();
            let idx = grad_names.iter().position(|n| n == name).unwrap();
            grad_values[idx].data()[j.parse::<usize>().unwrap()]
        };
        fd_model_params(&mut m1, &pretrain_loss, &grad_of, 2, &mut stats);

        // Segmentation stage: softmax + dice + cross-entropy path.
        let labels: Vec<u16> = (0..512).map(|i| (i % 3) as u16).collect();
        let oh: Tensor<f64> = one_hot(&labels, [8, 8, 8], 3).unwrap();
        let image5 = image.reshaped(&[1, 1, 8, 8, 8]).unwrap();
        let seg_loss = |m: &Model<f64>| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let lease = m.lease(&mut tape, false);
            let x = tape.constant(image5.clone());
            let enc = m.encode(&mut tape, &lease, x).unwrap();
            let logits = m.decode_segment(&mut tape, &lease, &enc).unwrap();
            let loss =
                dice_ce_from_logits(&mut tape, logits, &oh, DiceDenominator::Squared).unwrap();
            tape.value(loss).item()
        };
        let mut m2: Model<f64> = Model::new(cfg, Stage::Segment).unwrap();
        m2.init_weights(
            Scheme::KaimingNormal,
            &InitOptions { seed: 22, ..Default::default() },
        )
        .unwrap();
        let (seg_names, seg_values) = {
            let mut tape: Tape<f64> = Tape::new();
            let lease = m2.lease(&mut tape, true);
            let x = tape.constant(image5.clone());
            let enc = m2.encode(&mut tape, &lease, x).unwrap();
            let logits = m2.decode_segment(&mut tape, &lease, &enc).unwrap();
            let loss =
                dice_ce_from_logits(&mut tape, logits, &oh, DiceDenominator::Squared).unwrap();
            let grads = tape.backward(loss).unwrap();
            let names: Vec<String> = m2.names().iter().map(|s| s.to_string()).collect();
            let values: Vec<Tensor<f64>> = names
                .iter()
                .map(|n| {
                    grads
                        .get(lease.id(n).unwrap())
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(m2.get(n).unwrap().shape()))
                })
                .collect();
            (names, values)
        };
        let seg_grad_of = |key: &str| -> f64 {
            let (name, j) = key.split_once('#').unwrap();
            let idx = seg_names.iter().position(|n| n == name).unwrap();
            seg_values[idx].data()[j.parse::<usize>().unwrap()]
        };
        fd_model_params(&mut m2, &seg_loss, &seg_grad_of, 1, &mut stats);

        let elapsed = started.elapsed();
        assert!(stats.checked >= 100, "only {} coordinates sampled", stats.checked);
        assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
        format!(
            " — {} coordinates, max rel err {:.2e}, {:.1?}",
            stats.checked, stats.max_rel, elapsed
        )
    });
}

// ---------------------------------------------------------------------------
// criterion 2: initializer statistics

fn sample_stats(t: &Tensor<f64>) -> (f64, f64, f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn assert_uniform(t: &Tensor<f64>, bound: f64, what: &str) {
    let (mean, std, min, max) = sample_stats(t);
    assert!(min > -bound && max < bound, "{what}: [{min}, {max}] escapes ±{bound}");
    assert!(max > 0.995 * bound && min < -0.995 * bound, "{what}: bound not approached");
    let want = bound / 3f64.sqrt();
    assert!((std - want).abs() <= 0.02 * want, "{what}: std {std} vs {want}");
    assert!(mean.abs() < 0.02 * bound, "{what}: mean {mean} off-center");
}

fn assert_normal(t: &Tensor<f64>, sigma: f64, what: &str) {
    let (mean, std, _, _) = sample_stats(t);
    assert!((std - sigma).abs() <= 0.02 * sigma, "{what}: std {std} vs {sigma}");
    assert!(mean.abs() < 0.02 * sigma.max(1e-3), "{what}: mean {mean} off-center");
}

#[test]
fn criterion_2_initializer_statistics() {
    criterion(2, "initializer statistics", || {
        let started = Instant::now();
        const N: usize = 100_000;
        let draw = |scheme: Scheme, seed: u64| -> Tensor<f64> {
            init::sample(
                &InitSpec::new(scheme, 64, 64).with_seed(seed),
                &[N],
                LayerKind::Linear,
            )
            .unwrap()
        };

        // fan_in = fan_out = 64 throughout; every reference value below is
        // computed from the closed-form distribution, not from the library.
        assert_uniform(&draw(Scheme::XavierUniform, 101), (6.0f64 / 128.0).sqrt(), "xavier-uniform");

        let xn = draw(Scheme::XavierNormal, 102);
        assert_normal(&xn, 0.125, "xavier-normal");
        let (_, std, _, _) = sample_stats(&xn);
        assert!((std - 0.125).abs() <= 0.0025, "xavier-normal: {std} vs 0.125 ± 0.0025");

        assert_uniform(&draw(Scheme::KaimingUniform, 103), (3.0f64 / 64.0).sqrt(), "kaiming-uniform");
        assert_normal(&draw(Scheme::KaimingNormal, 104), 0.125, "kaiming-normal");

        // σ = 0.02 cut at ±2σ; the retained mass has a smaller spread by the
        // standard truncated-normal variance correction.
        let tn = draw(Scheme::TruncNormal, 105);
        let (_, _, tmin, tmax) = sample_stats(&tn);
        assert!(tmin >= -0.04 && tmax <= 0.04, "trunc-normal escapes ±2σ: [{tmin}, {tmax}]");
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let z = 2.0 * std_normal.cdf(2.0) - 1.0;
        let sigma_trunc = 0.02 * (1.0 - 4.0 * std_normal.pdf(2.0) / z).sqrt();
        assert_normal(&tn, sigma_trunc, "trunc-normal");

        assert_uniform(&draw(Scheme::UnetrDefault, 106), 0.125, "unetr-default linear");

        // conv with one input channel and a 3³ kernel: ±1/√27
        let conv = init::sample::<f64>(
            &InitSpec::new(Scheme::UnetrDefault, 1, 1).with_kernel([3, 3, 3]).with_seed(107),
            &[N],
            LayerKind::Conv,
        )
        .unwrap();
        assert_uniform(&conv, 1.0 / 27f64.sqrt(), "unetr-default conv");

        let elapsed = started.elapsed();
        assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
        format!(" — 6 schemes x {N} samples, {elapsed:.1?}")
    });
}

// ---------------------------------------------------------------------------
// criterion 3: transforms

fn permutation_index(order: &[usize]) -> usize {
    // Lehmer code: position of the permutation in lexicographic order
    let n = order.len();
    let mut idx = 0;
    for i in 0..n {
        let smaller = order[i + 1..].iter().filter(|&&x| x < order[i]).count();
        idx = idx * (n - i) + smaller;
    }
    idx
}

#[test]
fn criterion_3_transform_suite() {
    criterion(3, "transform suite", || {
        // 1000 shuffle/unshuffle round trips over random geometry
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..1000u64 {
            let b = rng.gen_range(2..=6usize);
            let slab = rng.gen_range(1..=3usize);
            let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=5));
            let shape = [c, h, w, b * slab];
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&shape, data).unwrap();
            let perm = PermutationRecord::sample(b, 1_000 + i).unwrap();
            let shuffled = shuffle_subvolumes(&x, &perm).unwrap();
            let back = unshuffle(&shuffled, &perm).unwrap();
            assert_eq!(x.data(), back.data(), "round trip {i} not exact");
        }

        // masking a 96³ volume on a 16³ grid at 40%: 216 cells, 86 masked
        let vol = tensor32(&[1, 96, 96, 96], 53, 0.0, 0.6);
        let (masked, record) = apply_mask(&vol, 0.4, [16, 16, 16], 7.0, 61).unwrap();
        assert_eq!(record.total_patches(), 216);
        assert_eq!(record.masked_patches(), 86);
        let filled = masked.data().iter().filter(|&&v| v == 7.0).count();
        assert_eq!(filled, 86 * 16 * 16 * 16, "expected 352,256 masked voxels");

        // permutation uniformity over all 4! = 24 outcomes
        let mut counts = [0usize; 24];
        const DRAWS: usize = 10_000;
        for i in 0..DRAWS {
            let p = PermutationRecord::sample(4, 40_000 + i as u64).unwrap();
            counts[permutation_index(&p.order)] += 1;
        }
        let expected = DRAWS as f64 / 24.0;
        let chi2: f64 = counts.iter().map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        }).sum();
        let p_value = 1.0 - ChiSquared::new(23.0).unwrap().cdf(chi2);
        assert!(p_value > 0.001, "chi-square {chi2:.1} gives p = {p_value:.5}");

        format!(" — 1000 round trips, 352,256 masked voxels, uniformity p = {p_value:.3}")
    });
}

// ---------------------------------------------------------------------------
// criterion 4: loss identities and oracles

#[test]
fn criterion_4_loss_identities() {
    criterion(4, "loss identities", || {
        // order loss vanishes when every slot puts all its mass on the right class
        let perm = PermutationRecord::sample(4, 3).unwrap();
        let mut hot = vec![-40.0f64; 16];
        for (f, &k) in perm.order.iter().enumerate() {
            hot[f * 4 + k] = 40.0;
        }
        let perfect = Tensor::from_vec(&[4, 4], hot).unwrap();
        let zero = order_prediction_loss(&[perfect], &perm).unwrap();
        assert!(zero.abs() < 1e-9, "perfect-logit loss {zero}");

        // four heads of flat 4-way logits: 4 heads · 4 slots · ln 4
        let flat: Tensor<f64> = Tensor::zeros(&[4, 4]);
        let logits = vec![flat.clone(), flat.clone(), flat.clone(), flat];
        let uniform = order_prediction_loss(&logits, &perm).unwrap();
        assert!((uniform - 16.0 * 4f64.ln()).abs() < 1e-9, "uniform loss {uniform}");
        assert!((uniform - 22.18070977791825).abs() < 1e-9);

        // reconstruction of an identical volume costs exactly nothing
        let x = tensor64(&[1, 4, 4, 4], 67, -1.0, 1.0);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);

        // dice+ce at a perfect prediction, all classes present
        let labels: Vec<u16> = (0..64).map(|i| (i % 4) as u16).collect();
        let oh: Tensor<f64> = one_hot(&labels, [4, 4, 4], 4).unwrap();
        let perfect_seg = dice_ce_loss(&oh, &oh, DiceDenominator::Squared).unwrap();
        assert!(perfect_seg.abs() <= 1e-6, "perfect dice+ce {perfect_seg}");

        // --- brute-force oracles on tiny fixtures ---------------------------

        // order loss vs a hand-rolled log-sum-exp
        let raw = tensor64(&[3, 3], 71, -1.5, 1.5);
        let p3 = PermutationRecord::sample(3, 5).unwrap();
        let lib = order_prediction_loss(&[raw.clone(), raw.clone()], &p3).unwrap();
        let mut want = 0.0;
        for _level in 0..2 {
            for f in 0..3 {
                let row = &raw.data()[f * 3..f * 3 + 3];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                want += lse - row[p3.order[f]];
            }
        }
        assert!((lib - want).abs() <= 1e-10 * want.abs().max(1.0), "{lib} vs {want}");

        // reconstruction vs an explicit mean of squares
        let a = tensor64(&[1, 2, 2, 2], 73, -1.0, 1.0);
        let b = tensor64(&[1, 2, 2, 2], 79, -1.0, 1.0);
        let lib = reconstruction_loss(&a, &b).unwrap();
        let want = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 8.0;
        assert!((lib - want).abs() <= 1e-10 * want.abs().max(1.0));

        // dice+ce vs the printed formula, evaluated with plain loops
        let (j, dims) = (3usize, [3usize, 3, 3]);
        let n = 27usize;
        let raw = pseudo(j * n, 83, -1.2, 1.2);
        let mut probs = vec![0.0f64; j * n];
        for vox in 0..n {
            let logits: Vec<f64> = (0..j).map(|c| raw[c * n + vox]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            for c in 0..j {
                probs[c * n + vox] = (logits[c] - m).exp() / z;
            }
        }
        let labels: Vec<u16> = (0..n).map(|i| ((i * 5 + 1) % 3) as u16).collect();
        let oh: Tensor<f64> = one_hot(&labels, dims, j).unwrap();
        let pt = Tensor::from_vec(&[j, 3, 3, 3], probs.clone()).unwrap();
        let lib = dice_ce_loss(&oh, &pt, DiceDenominator::Squared).unwrap();
        let mut dice_term = 0.0;
        for c in 0..j {
            let (mut num, mut dp, mut dy) = (0.0, 0.0, 0.0);
            for vox in 0..n {
                let p = probs[c * n + vox];
                let y = oh.data()[c * n + vox];
                num += p * y;
                dp += p * p;
                dy += y * y;
            }
            dice_term += num / (dp + dy + 1e-5);
        }
        dice_term *= 2.0 / j as f64;
        let mut ce_term = 0.0;
        for vox in 0..n {
            let p = probs[labels[vox] as usize * n + vox];
            ce_term += if p > 1e-12 { p.ln() } else { 1e-12f64.ln() };
        }
        ce_term /= n as f64;
        let want = 1.0 - (dice_term + ce_term);
        assert!((lib - want).abs() <= 1e-10 * want.abs().max(1.0), "{lib} vs {want}");

        format!(" — flat-logit loss {uniform:.11}, perfect dice+ce {perfect_seg:.1e}")
    });
}

// ---------------------------------------------------------------------------
// criteria 5 and 9: the training comparison

struct Comparison {
    outcome: ComparisonOutcome,
    elapsed: Duration,
    train: Vec<VolumeSample>,
    val: Vec<VolumeSample>,
    model_cfg: ModelConfig,
    run_cfg: RunConfig,
    seeds: Vec<u64>,
}

static COMPARISON: OnceLock<Comparison> = OnceLock::new();

fn comparison() -> &'static Comparison {
    COMPARISON.get_or_init(|| {
        let started = Instant::now();
        let spec = SynthSpec::balanced([32, 32, 32], 4, 7);
        let mut all = generate_dataset(&spec, 14).unwrap();
        let val = all.split_off(10);
        let train = all;

        let model_cfg = ModelConfig {
            in_channels: 1,
            dims: [32, 32, 32],
            patch: 8,
            embed: 16,
            levels: 2,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 4,
            dec_channels: vec![8, 8, 8],
        };
        let mut run_cfg = RunConfig::default();
        run_cfg.step1.epochs = 50;
        run_cfg.step1.mask_ratio = 0.4;
        run_cfg.step1.mask_patch = 4;
        run_cfg.step1.heads_used = vec![1, 2];
        run_cfg.step2.epochs = 150;

        let seeds = vec![0u64, 1, 2];
        let outcome =
            run_initialization_comparison(&train, &val, &model_cfg, &run_cfg, &seeds).unwrap();
        Comparison {
            outcome,
            elapsed: started.elapsed(),
            train,
            val,
            model_cfg,
            run_cfg,
            seeds,
        }
    })
}

#[test]
fn criterion_5_learned_init_beats_default_init() {
    criterion(5, "directional training comparison", || {
        let c = comparison();
        let (pre, base) = (&c.outcome.pretrained, &c.outcome.baseline);
        assert_eq!(pre.total_epochs, base.total_epochs, "unequal budgets");
        assert_eq!(pre.seed_dice.len(), 3);
        assert_eq!(base.seed_dice.len(), 3);
        assert!(
            pre.mean_dice > base.mean_dice,
            "pretrained {:.3} vs baseline {:.3} (per seed {:?} vs {:?})",
            pre.mean_dice,
            base.mean_dice,
            pre.seed_dice,
            base.seed_dice
        );
        assert!(c.elapsed < Duration::from_secs(1800), "took {:?}", c.elapsed);
        format!(
            " — mean val Dice {:.2} vs {:.2} over 3 seeds, {:.0?}",
            pre.mean_dice, base.mean_dice, c.elapsed
        )
    });
}

#[test]
fn criterion_9_comparison_reruns_byte_identical() {
    criterion(9, "determinism", || {
        let c = comparison();
        let rerun = run_initialization_comparison(
            &c.train,
            &c.val,
            &c.model_cfg,
            &c.run_cfg,
            &c.seeds[..1],
        )
        .unwrap();
        assert_eq!(
            rerun.pretrained.val_csvs[0].as_bytes(),
            c.outcome.pretrained.val_csvs[0].as_bytes(),
            "pretrained-arm metrics drifted between identically seeded runs"
        );
        assert_eq!(
            rerun.baseline.val_csvs[0].as_bytes(),
            c.outcome.baseline.val_csvs[0].as_bytes(),
            "baseline-arm metrics drifted between identically seeded runs"
        );
        format!(
            " — {} + {} CSV bytes identical across runs",
            rerun.pretrained.val_csvs[0].len(),
            rerun.baseline.val_csvs[0].len()
        )
    });
}

// ---------------------------------------------------------------------------
// criterion 6: ablation grid

#[test]
fn criterion_6_ablation_grid_runs_to_completion() {
    criterion(6, "ablation grid", || {
        let spec = SynthSpec::balanced([16, 16, 16], 4, 41);
        let mut all = generate_dataset(&spec, 4).unwrap();
        let val = all.split_off(3);
        let train = all;
        let model_cfg = ModelConfig {
            in_channels: 1,
            dims: [16, 16, 16],
            patch: 4,
            embed: 16,
            levels: 4,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            classes: 4,
            dec_channels: vec![8, 4],
        };
        let mut base = RunConfig::default();
        base.step1.epochs = 1;
        base.step1.mask_patch = 4;
        base.step2.epochs = 2;
        base.val_every = 1;

        let (rows, csv) = run_ablations(&train, &val, &model_cfg, &base).unwrap();
        assert_eq!(rows.len(), 9, "expected 4 head subsets + 5 mask ratios");

        let heads: Vec<&str> = rows
            .iter()
            .filter(|r| r.group == "heads")
            .map(|r| r.setting.as_str())
            .collect();
        assert_eq!(heads, ["t4", "t3+t4", "t2+t3+t4", "t1+t2+t3+t4"]);
        let ratios: Vec<&str> = rows
            .iter()
            .filter(|r| r.group == "mask_ratio")
            .map(|r| r.setting.as_str())
            .collect();
        assert_eq!(ratios, ["0", "0.2", "0.4", "0.6", "0.8"]);
        for r in &rows {
            assert!(r.mean_val_dice.is_finite(), "{}/{} produced {}", r.group, r.setting, r.mean_val_dice);
        }

        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "group,setting,mean_val_dice");
        assert_eq!(lines.len(), 10, "header plus one row per run");

        format!(" — 9 runs, 9 CSV rows")
    });
}

// ---------------------------------------------------------------------------
// criterion 7: sliding-window inference

#[test]
fn criterion_7_sliding_window_inference() {
    criterion(7, "sliding-window inference", || {
        // window == volume must reproduce the direct forward pass bit for bit
        let cfg = ModelConfig {
            in_channels: 1,
            dims: [16, 16, 16],
            patch: 4,
            embed: 8,
            levels: 2,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 3,
            dec_channels: vec![4, 4],
        };
        let mut model: Model<f32> = Model::new(cfg, Stage::Segment).unwrap();
        model
            .init_weights(Scheme::UnetrDefault, &InitOptions { seed: 3, ..Default::default() })
            .unwrap();
        let img = tensor32(&[1, 16, 16, 16], 89, -1.0, 1.0);

        let mut tape: Tape<f32> = Tape::new();
        let lease = model.lease(&mut tape, false);
        let x = tape.constant(img.reshaped(&[1, 1, 16, 16, 16]).unwrap());
        let enc = model.encode(&mut tape, &lease, x).unwrap();
        let logits = model.decode_segment(&mut tape, &lease, &enc).unwrap();
        let lv = tape.value(logits);
        let n = 16 * 16 * 16;
        let mut direct = vec![0u16; n];
        for vox in 0..n {
            let (mut best, mut bv) = (0usize, lv.data()[vox]);
            for c in 1..3 {
                let v = lv.data()[c * n + vox];
                if v > bv {
                    bv = v;
                    best = c;
                }
            }
            direct[vox] = best as u16;
        }
        let windowed = sliding_window_infer(&model, &img, [16, 16, 16], 0.5).unwrap();
        assert_eq!(windowed, direct, "full-volume window disagrees with direct forward");

        // the canonical 96-into-64 geometry tiles into exactly 8 windows
        let starts = window_starts(96, 64, 0.5).unwrap();
        assert_eq!(starts, [0, 32]);
        assert_eq!(starts.len().pow(3), 8);

        // random geometries never leave a voxel uncovered
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..50 {
            let overlap = [0.0, 0.25, 0.5, 0.75][rng.gen_range(0..4)];
            for _axis in 0..3 {
                let window = rng.gen_range(3..=40usize);
                let extent = window + rng.gen_range(0..=37usize);
                let starts = window_starts(extent, window, overlap).unwrap();
                let mut covered = vec![false; extent];
                for &s in &starts {
                    assert!(s + window <= extent, "case {case}: window escapes volume");
                    covered[s..s + window].iter_mut().for_each(|c| *c = true);
                }
                assert!(
                    covered.iter().all(|&c| c),
                    "case {case}: extent {extent}, window {window}, overlap {overlap} leaves gaps"
                );
            }
        }

        format!(" — full-volume pass bit-exact, 8-window tiling, 50 fuzz cases covered")
    });
}

// ---------------------------------------------------------------------------
// criterion 8: serialization

#[test]
fn criterion_8_serialization_roundtrips_and_rejects() {
    criterion(8, "serialization", || {
        let dir = tempfile::tempdir().unwrap();

        // checkpoint: save -> load -> byte and value identity
        let cfg = ModelConfig {
            in_channels: 1,
            dims: [8, 8, 8],
            patch: 4,
            embed: 8,
            levels: 2,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 3,
            dec_channels: vec![4, 4],
        };
        let mut model: Model<f32> = Model::new(cfg, Stage::Pretrain).unwrap();
        model
            .init_weights(Scheme::XavierUniform, &InitOptions { seed: 13, ..Default::default() })
            .unwrap();
        let run = RunConfig::default();
        let path = dir.path().join("model.vwi");
        save_checkpoint(&path, &model, &run).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.to_bytes(), Checkpoint::from_model(&model, &run).to_bytes());
        let restored = loaded.into_model().unwrap();
        for name in model.names() {
            let a = model.get(name).unwrap();
            let b = restored.get(name).unwrap();
            assert!(
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {name} drifted through the file"
            );
        }

        // volume: write -> read -> bit identity
        let sample = &generate_dataset(&SynthSpec::balanced([16, 16, 16], 3, 77), 1).unwrap()[0];
        let vpath = dir.path().join(format!("{}.vvol", sample.id));
        write_volume(&vpath, sample).unwrap();
        let back = read_volume(&vpath).unwrap();
        assert_eq!(back.id, sample.id);
        assert_eq!(back.dims, sample.dims);
        assert_eq!(back.labels, sample.labels);
        assert!(sample
            .image
            .data()
            .iter()
            .zip(back.image.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        // corrupted headers are format errors, never panics
        let ck_bytes = std::fs::read(&path).unwrap();
        let mut bad_magic = ck_bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(VoxError::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&ck_bytes[..9]), Err(VoxError::Format { .. })));

        let vol_bytes = std::fs::read(&vpath).unwrap();
        let bad_path = dir.path().join("bad.vvol");
        let mut bad = vol_bytes.clone();
        bad[2] ^= 0x55;
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(read_volume(&bad_path), Err(VoxError::Format { .. })));
        std::fs::write(&bad_path, &vol_bytes[..vol_bytes.len() / 2]).unwrap();
        assert!(matches!(read_volume(&bad_path), Err(VoxError::Format { .. })));

        // random single-byte corruption anywhere: parse or structured error
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let mut rejected = 0usize;
        for _ in 0..30 {
            let mut mutated = ck_bytes.clone();
            let at = rng.gen_range(0..mutated.len());
            mutated[at] ^= 1 << rng.gen_range(0..8u8);
            match Checkpoint::from_bytes(&mutated) {
                Ok(_) => {}
                Err(VoxError::Format { .. }) => rejected += 1,
                Err(other) => panic!("unexpected error class: {other}"),
            }
        }
        for _ in 0..30 {
            let mut mutated = vol_bytes.clone();
            let at = rng.gen_range(0..mutated.len());
            mutated[at] ^= 1 << rng.gen_range(0..8u8);
            std::fs::write(&bad_path, &mutated).unwrap();
            match read_volume(&bad_path) {
                Ok(_) => {}
                Err(VoxError::Format { .. }) => {}
                Err(other) => panic!("unexpected error class: {other}"),
            }
        }

        format!(" — byte-identical round trips; {rejected}/30 header mutations rejected cleanly")
    });
}
