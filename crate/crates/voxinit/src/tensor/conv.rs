//! Raw 3D convolution kernels.
//!
//! Three primitives cover the whole conv family:
//!   gather      -> conv3d forward, conv_transpose3d input-gradient
//!   scatter     -> conv_transpose3d forward, conv3d input-gradient
//!   weight_grad -> both weight gradients
//!
//! conv_transpose3d forward IS conv3d's adjoint applied with the same
//! weight tensor, so the inner-product identity
//! `<conv(x,w), y> == <x, convt(y,w)>` holds structurally.
//!
//! All kernels are cross-correlations (no kernel flip), stride and padding
//! uniform across the three spatial axes, loops in fixed order so results
//! are bit-deterministic.

use crate::scalar::Scalar;

/// Output spatial extent of a strided gather: floor((in + 2p - k)/s) + 1.
/// `None` when the kernel does not fit in the padded input.
pub fn gather_out_dim(in_d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_d + 2 * pad;
    if k == 0 || k > padded || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial extent of a strided scatter: (in - 1)*s + k - 2p.
pub fn scatter_out_dim(in_d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (in_d - 1) * stride + k;
    if full < 2 * pad + 1 {
        return None;
    }
    Some(full - 2 * pad)
}

/// Inclusive range of positions q in [0, q_len) such that
/// q*s + k_off - p lands inside [0, target_len). Empty when lo > hi.
#[inline]
fn stride_range(q_len: usize, target_len: usize, k_off: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
    let hi_num = target_len - 1 + p;
    if hi_num < k_off {
        return (1, 0);
    }
    let hi = ((hi_num - k_off) / s).min(q_len - 1);
    (lo, hi)
}

fn volume(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Inner-product over two equal-length rows, eight partial sums so the
/// optimizer can keep them in one vector register. Deterministic order,
/// but a different order than a plain running sum.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (av, bv) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            lanes[j] += av[j] * bv[j];
        }
    }
    let mut acc = T::zero();
    for (&av, &bv) in ca.remainder().iter().zip(cb.remainder()) {
        acc += av * bv;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

/// out[i] += wv * x[i] over two equal-length rows.
#[inline]
fn axpy_row<T: Scalar>(wv: T, xs: &[T], out: &mut [T]) {
    for (o, &xv) in out.iter_mut().zip(xs) {
        *o += wv * xv;
    }
}

// k=2, s=2, p=0 fast paths — the geometry of every decoder up-step. Output
// positions pair off with input positions one-to-one per kernel tap, so the
// two taps along the innermost axis fuse into a single paired row pass.
// Per-element accumulation order matches the generic loops exactly.

#[allow(clippy::too_many_arguments)]
fn gather_k2s2<T: Scalar>(
    x: &[T],
    batch: usize,
    c_in: usize,
    in_sp: [usize; 3],
    w: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    out_sp: [usize; 3],
    out: &mut [T],
) {
    let in_vol = volume(in_sp);
    let out_vol = volume(out_sp);
    for n in 0..batch {
        for co in 0..c_out {
            let out_base = (n * c_out + co) * out_vol;
            if let Some(b) = bias {
                out[out_base..out_base + out_vol].fill(b[co]);
            }
            for ci in 0..c_in {
                let x_base = (n * c_in + ci) * in_vol;
                let wk = &w[(co * c_in + ci) * 8..(co * c_in + ci) * 8 + 8];
                for kh in 0..2 {
                    for kw in 0..2 {
                        let w0 = wk[(kh * 2 + kw) * 2];
                        let w1 = wk[(kh * 2 + kw) * 2 + 1];
                        for oh in 0..out_sp[0] {
                            let ih = oh * 2 + kh;
                            for ow in 0..out_sp[1] {
                                let iw = ow * 2 + kw;
                                let orow = out_base + (oh * out_sp[1] + ow) * out_sp[2];
                                let irow = x_base + (ih * in_sp[1] + iw) * in_sp[2];
                                let os = &mut out[orow..orow + out_sp[2]];
                                let xs = &x[irow..irow + in_sp[2]];
                                for (o, xp) in os.iter_mut().zip(xs.chunks_exact(2)) {
                                    *o += w0 * xp[0];
                                    *o += w1 * xp[1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_k2s2<T: Scalar>(
    x: &[T],
    batch: usize,
    c_from: usize,
    in_sp: [usize; 3],
    w: &[T],
    c_to: usize,
    out_sp: [usize; 3],
    out: &mut [T],
) {
    let in_vol = volume(in_sp);
    let out_vol = volume(out_sp);
    for n in 0..batch {
        for ct in 0..c_to {
            let out_base = (n * c_to + ct) * out_vol;
            for cf in 0..c_from {
                let x_base = (n * c_from + cf) * in_vol;
                let wk = &w[(cf * c_to + ct) * 8..(cf * c_to + ct) * 8 + 8];
                for kh in 0..2 {
                    for kw in 0..2 {
                        let w0 = wk[(kh * 2 + kw) * 2];
                        let w1 = wk[(kh * 2 + kw) * 2 + 1];
                        for ih in 0..in_sp[0] {
                            let oh = ih * 2 + kh;
                            for iw in 0..in_sp[1] {
                                let ow = iw * 2 + kw;
                                let irow = x_base + (ih * in_sp[1] + iw) * in_sp[2];
                                let orow = out_base + (oh * out_sp[1] + ow) * out_sp[2];
                                let xs = &x[irow..irow + in_sp[2]];
                                let os = &mut out[orow..orow + 2 * in_sp[2]];
                                for (op, &xv) in os.chunks_exact_mut(2).zip(xs) {
                                    op[0] += w0 * xv;
                                    op[1] += w1 * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_grad_k2s2<T: Scalar>(
    a: &[T],
    c_a: usize,
    a_sp: [usize; 3],
    b: &[T],
    c_b: usize,
    b_sp: [usize; 3],
    batch: usize,
    gw: &mut [T],
) {
    let a_vol = volume(a_sp);
    let b_vol = volume(b_sp);
    for n in 0..batch {
        for ca in 0..c_a {
            let a_base = (n * c_a + ca) * a_vol;
            for cb in 0..c_b {
                let b_base = (n * c_b + cb) * b_vol;
                for kh in 0..2 {
                    for kw in 0..2 {
                        let mut acc0 = T::zero();
                        let mut acc1 = T::zero();
                        for qh in 0..a_sp[0] {
                            let bh = qh * 2 + kh;
                            for qw in 0..a_sp[1] {
                                let bw = qw * 2 + kw;
                                let arow = a_base + (qh * a_sp[1] + qw) * a_sp[2];
                                let brow = b_base + (bh * b_sp[1] + bw) * b_sp[2];
                                let asl = &a[arow..arow + a_sp[2]];
                                let bsl = &b[brow..brow + 2 * a_sp[2]];
                                for (&av, bp) in asl.iter().zip(bsl.chunks_exact(2)) {
                                    acc0 += av * bp[0];
                                    acc1 += av * bp[1];
                                }
                            }
                        }
                        let g_base = (ca * c_b + cb) * 8 + (kh * 2 + kw) * 2;
                        gw[g_base] += acc0;
                        gw[g_base + 1] += acc1;
                    }
                }
            }
        }
    }
}

/// out[n,co,o] = bias[co] + sum_{ci,k} x[n, ci, o*s + k - p] * w[co, ci, k]
#[allow(clippy::too_many_arguments)]
pub fn gather<T: Scalar>(
    x: &[T],
    batch: usize,
    c_in: usize,
    in_sp: [usize; 3],
    w: &[T],
    c_out: usize,
    ks: [usize; 3],
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out_sp: [usize; 3],
    out: &mut [T],
) {
    let in_vol = volume(in_sp);
    let out_vol = volume(out_sp);
    let kv = volume(ks);
    debug_assert_eq!(out.len(), batch * c_out * out_vol);

    if stride == 2 && pad == 0 && ks == [2, 2, 2] && (0..3).all(|i| in_sp[i] >= 2 * out_sp[i]) {
        return gather_k2s2(x, batch, c_in, in_sp, w, c_out, bias, out_sp, out);
    }

    for n in 0..batch {
        for co in 0..c_out {
            let out_base = (n * c_out + co) * out_vol;
            if let Some(b) = bias {
                out[out_base..out_base + out_vol].fill(b[co]);
            }
            for ci in 0..c_in {
                let x_base = (n * c_in + ci) * in_vol;
                for kh in 0..ks[0] {
                    let (oh_lo, oh_hi) = stride_range(out_sp[0], in_sp[0], kh, stride, pad);
                    for kw in 0..ks[1] {
                        let (ow_lo, ow_hi) = stride_range(out_sp[1], in_sp[1], kw, stride, pad);
                        for kd in 0..ks[2] {
                            let (od_lo, od_hi) = stride_range(out_sp[2], in_sp[2], kd, stride, pad);
                            if oh_lo > oh_hi || ow_lo > ow_hi || od_lo > od_hi {
                                continue;
                            }
                            let wv = w[((co * c_in + ci) * kv)
                                + (kh * ks[1] + kw) * ks[2]
                                + kd];
                            let id0 = od_lo * stride + kd - pad;
                            let run = od_hi - od_lo + 1;
                            for oh in oh_lo..oh_hi + 1 {
                                let ih = oh * stride + kh - pad;
                                for ow in ow_lo..ow_hi + 1 {
                                    let iw = ow * stride + kw - pad;
                                    let orow = out_base + (oh * out_sp[1] + ow) * out_sp[2];
                                    let irow = x_base + (ih * in_sp[1] + iw) * in_sp[2];
                                    if stride == 1 {
                                        axpy_row(
                                            wv,
                                            &x[irow + id0..irow + id0 + run],
                                            &mut out[orow + od_lo..orow + od_lo + run],
                                        );
                                    } else {
                                        let mut ix = irow + id0;
                                        for od in od_lo..od_hi + 1 {
                                            out[orow + od] += wv * x[ix];
                                            ix += stride;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[n, ct, q*s + k - p] += x[n, cf, q] * w[cf, ct, k]
///
/// Weight layout is (from-channel, to-channel, k). For conv_transpose3d
/// forward pass `from = c_in`; for conv3d's input gradient `from = c_out`
/// with the ordinary conv weight (c_out, c_in, k) read in place.
#[allow(clippy::too_many_arguments)]
pub fn scatter<T: Scalar>(
    x: &[T],
    batch: usize,
    c_from: usize,
    in_sp: [usize; 3],
    w: &[T],
    c_to: usize,
    ks: [usize; 3],
    stride: usize,
    pad: usize,
    out_sp: [usize; 3],
    out: &mut [T],
) {
    let in_vol = volume(in_sp);
    let out_vol = volume(out_sp);
    let kv = volume(ks);
    debug_assert_eq!(out.len(), batch * c_to * out_vol);

    if stride == 2 && pad == 0 && ks == [2, 2, 2] && (0..3).all(|i| out_sp[i] >= 2 * in_sp[i]) {
        return scatter_k2s2(x, batch, c_from, in_sp, w, c_to, out_sp, out);
    }

    for n in 0..batch {
        for ct in 0..c_to {
            let out_base = (n * c_to + ct) * out_vol;
            for cf in 0..c_from {
                let x_base = (n * c_from + cf) * in_vol;
                for kh in 0..ks[0] {
                    let (ih_lo, ih_hi) = stride_range(in_sp[0], out_sp[0], kh, stride, pad);
                    for kw in 0..ks[1] {
                        let (iw_lo, iw_hi) = stride_range(in_sp[1], out_sp[1], kw, stride, pad);
                        for kd in 0..ks[2] {
                            let (id_lo, id_hi) = stride_range(in_sp[2], out_sp[2], kd, stride, pad);
                            if ih_lo > ih_hi || iw_lo > iw_hi || id_lo > id_hi {
                                continue;
                            }
                            let wv = w[((cf * c_to + ct) * kv)
                                + (kh * ks[1] + kw) * ks[2]
                                + kd];
                            let od0 = id_lo * stride + kd - pad;
                            let run = id_hi - id_lo + 1;
                            for ih in ih_lo..ih_hi + 1 {
                                let oh = ih * stride + kh - pad;
                                for iw in iw_lo..iw_hi + 1 {
                                    let ow = iw * stride + kw - pad;
                                    let irow = x_base + (ih * in_sp[1] + iw) * in_sp[2];
                                    let orow = out_base + (oh * out_sp[1] + ow) * out_sp[2];
                                    if stride == 1 {
                                        axpy_row(
                                            wv,
                                            &x[irow + id_lo..irow + id_lo + run],
                                            &mut out[orow + od0..orow + od0 + run],
                                        );
                                    } else {
                                        let mut io = orow + od0;
                                        for id in id_lo..id_hi + 1 {
                                            out[io] += wv * x[irow + id];
                                            io += stride;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gw[ca, cb, k] += sum_{n,q} a[n, ca, q] * b[n, cb, q*s + k - p]
///
/// conv3d weight grad:  a = output-gradient, b = input.
/// convt3d weight grad: a = input, b = output-gradient.
#[allow(clippy::too_many_arguments)]
pub fn weight_grad<T: Scalar>(
    a: &[T],
    c_a: usize,
    a_sp: [usize; 3],
    b: &[T],
    c_b: usize,
    b_sp: [usize; 3],
    batch: usize,
    ks: [usize; 3],
    stride: usize,
    pad: usize,
    gw: &mut [T],
) {
    let a_vol = volume(a_sp);
    let b_vol = volume(b_sp);
    let kv = volume(ks);
    debug_assert_eq!(gw.len(), c_a * c_b * kv);

    if stride == 2 && pad == 0 && ks == [2, 2, 2] && (0..3).all(|i| b_sp[i] >= 2 * a_sp[i]) {
        return weight_grad_k2s2(a, c_a, a_sp, b, c_b, b_sp, batch, gw);
    }

    for n in 0..batch {
        for ca in 0..c_a {
            let a_base = (n * c_a + ca) * a_vol;
            for cb in 0..c_b {
                let b_base = (n * c_b + cb) * b_vol;
                for kh in 0..ks[0] {
                    let (qh_lo, qh_hi) = stride_range(a_sp[0], b_sp[0], kh, stride, pad);
                    for kw in 0..ks[1] {
                        let (qw_lo, qw_hi) = stride_range(a_sp[1], b_sp[1], kw, stride, pad);
                        for kd in 0..ks[2] {
                            let (qd_lo, qd_hi) = stride_range(a_sp[2], b_sp[2], kd, stride, pad);
                            if qh_lo > qh_hi || qw_lo > qw_hi || qd_lo > qd_hi {
                                continue;
                            }
                            let bd0 = qd_lo * stride + kd - pad;
                            let run = qd_hi - qd_lo + 1;
                            let mut acc = T::zero();
                            for qh in qh_lo..qh_hi + 1 {
                                let bh = qh * stride + kh - pad;
                                for qw in qw_lo..qw_hi + 1 {
                                    let bw = qw * stride + kw - pad;
                                    let arow = a_base + (qh * a_sp[1] + qw) * a_sp[2];
                                    let brow = b_base + (bh * b_sp[1] + bw) * b_sp[2];
                                    if stride == 1 {
                                        acc += dot(
                                            &a[arow + qd_lo..arow + qd_lo + run],
                                            &b[brow + bd0..brow + bd0 + run],
                                        );
                                    } else {
                                        let mut ib = brow + bd0;
                                        for qd in qd_lo..qd_hi + 1 {
                                            acc += a[arow + qd] * b[ib];
                                            ib += stride;
                                        }
                                    }
                                }
                            }
                            gw[(ca * c_b + cb) * kv + (kh * ks[1] + kw) * ks[2] + kd] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// gb[c] += sum over batch and spatial positions of g[n, c, ...]
pub fn bias_grad<T: Scalar>(g: &[T], batch: usize, channels: usize, sp_vol: usize, gb: &mut [T]) {
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * sp_vol;
            let mut acc = T::zero();
            for v in &g[base..base + sp_vol] {
                acc += *v;
            }
            gb[c] += acc;
        }
    }
}
