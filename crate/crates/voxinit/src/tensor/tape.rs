//! Reverse-mode autodiff on an append-only tape.
//!
//! Nodes are recorded in construction order, so the tape is already
//! topologically sorted; backward is a single reverse sweep. Gradients are
//! kept only for leaf nodes (parameters/inputs) and freed as soon as an
//! intermediate has been consumed, which keeps peak memory close to the
//! forward-activation footprint.

use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::conv;
use crate::tensor::{strides_for, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Matmul(NodeId, NodeId),
    Conv3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvT3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    /// ln(max(x, eps)); gradient is zero on the clamped region.
    LogClamped {
        x: NodeId,
        eps: T,
    },
    Gelu(NodeId),
    LeakyRelu(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    SumAxes {
        x: NodeId,
        removed: Vec<bool>,
        scale: T,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// broadcast helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(VoxError::shape(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        };
    }
    Ok(out)
}

/// Strides for reading `shape` at indices of `out` (right-aligned, 0 where
/// the operand is broadcast along an axis).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let natural = strides_for(shape);
    let mut s = vec![0usize; out.len()];
    let off = out.len() - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { natural[i] };
    }
    s
}

/// Visit every index of `shape` in row-major order, calling
/// `f(linear, offset_a, offset_b)` where the offsets follow `sa`/`sb`.
fn for_each2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let natural = strides_for(shape);
    if sa == natural.as_slice() && sb == natural.as_slice() {
        for i in 0..numel {
            f(i, i, i);
        }
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..numel {
        f(lin, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
}

/// Out-shape, plus per-input-axis stride into the reduced tensor
/// (0 on removed axes).
fn reduction_strides(in_shape: &[usize], removed: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = in_shape
        .iter()
        .zip(removed)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_nat = strides_for(&out_shape);
    let mut strides = vec![0usize; in_shape.len()];
    let mut k = 0;
    for (ax, &r) in removed.iter().enumerate() {
        if !r {
            strides[ax] = out_nat[k];
            k += 1;
        }
    }
    (out_shape, strides)
}

// ---------------------------------------------------------------------------
// matmul kernels (row-major, accumulating)

fn mm_acc_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] · b[k,n]^T
fn mm_acc_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + l] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T · b[m,n]
fn mm_acc_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

struct MatmulPlan {
    batch_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(VoxError::shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} x {b:?}"
        )));
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(VoxError::shape(format!(
            "matmul inner dimensions disagree: {a:?} x {b:?}"
        )));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape = broadcast_shape(ab, bb)?;
    let mut a_strides = bcast_strides(ab, &batch_shape);
    let mut b_strides = bcast_strides(bb, &batch_shape);
    for s in &mut a_strides {
        *s *= m * ka;
    }
    for s in &mut b_strides {
        *s *= kb * n;
    }
    Ok(MatmulPlan {
        batch_shape,
        a_strides,
        b_strides,
        m,
        k: ka,
        n,
    })
}

// ---------------------------------------------------------------------------
// pointwise math

fn softmax_rows<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = x[base];
            for a in 1..len {
                let v = x[base + a * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..len {
                sum += (x[base + a * inner] - mx).exp();
            }
            if log {
                let ls = sum.ln();
                for a in 0..len {
                    out[base + a * inner] = x[base + a * inner] - mx - ls;
                }
            } else {
                for a in 0..len {
                    out[base + a * inner] = (x[base + a * inner] - mx).exp() / sum;
                }
            }
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let s = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let s = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let du = s * (T::one() + three * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

// ---------------------------------------------------------------------------

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients are retained only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // -- elementwise ---------------------------------------------------------

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let sa = bcast_strides(va.shape(), &out_shape);
        let sb = bcast_strides(vb.shape(), &out_shape);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        {
            let (da, db) = (va.data(), vb.data());
            for_each2(&out_shape, &sa, &sb, |lin, oa, ob| {
                data[lin] = f(da[oa], db[ob]);
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a, c), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(gelu_fwd);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn log_clamped(&mut self, a: NodeId, eps: T) -> Result<NodeId> {
        if eps <= T::zero() {
            return Err(VoxError::config("log_clamped eps must be positive"));
        }
        let v = self.nodes[a.0].value.map(|x| if x > eps { x.ln() } else { eps.ln() });
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::LogClamped { x: a, eps }, rg))
    }

    // -- matmul --------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = matmul_plan(va.shape(), vb.shape())?;
        let MatmulPlan {
            batch_shape,
            a_strides,
            b_strides,
            m,
            k,
            n,
        } = plan;
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        {
            let (da, db) = (va.data(), vb.data());
            for_each2(&batch_shape, &a_strides, &b_strides, |lin, oa, ob| {
                mm_acc_nn(
                    &da[oa..oa + m * k],
                    &db[ob..ob + k * n],
                    m,
                    k,
                    n,
                    &mut data[lin * m * n..(lin + 1) * m * n],
                );
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&out_shape, data)?, Op::Matmul(a, b), rg))
    }

    // -- convolutions ---------------------------------------------------------

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 5 || vw.rank() != 5 {
            return Err(VoxError::shape(format!(
                "conv3d expects rank-5 input and weight, got {:?} and {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        if stride == 0 {
            return Err(VoxError::config("conv3d stride must be >= 1"));
        }
        let (batch, c_in) = (vx.shape()[0], vx.shape()[1]);
        let in_sp = [vx.shape()[2], vx.shape()[3], vx.shape()[4]];
        let (c_out, wc_in) = (vw.shape()[0], vw.shape()[1]);
        let ks = [vw.shape()[2], vw.shape()[3], vw.shape()[4]];
        if wc_in != c_in {
            return Err(VoxError::shape(format!(
                "conv3d channel mismatch: input {:?} vs weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let mut out_sp = [0usize; 3];
        for i in 0..3 {
            out_sp[i] = conv::gather_out_dim(in_sp[i], ks[i], stride, pad).ok_or_else(|| {
                VoxError::shape(format!(
                    "conv3d kernel {:?} larger than padded input {:?} (pad {pad})",
                    ks, in_sp
                ))
            })?;
        }
        let bias_data = match bias {
            Some(b) => {
                let vb = &self.nodes[b.0].value;
                if vb.shape() != [c_out] {
                    return Err(VoxError::shape(format!(
                        "conv3d bias shape {:?} does not match {c_out} output channels",
                        vb.shape()
                    )));
                }
                Some(b)
            }
            None => None,
        };
        let out_shape = [batch, c_out, out_sp[0], out_sp[1], out_sp[2]];
        let mut data = vec![T::zero(); out_shape.iter().product()];
        conv::gather(
            vx.data(),
            batch,
            c_in,
            in_sp,
            vw.data(),
            c_out,
            ks,
            bias_data.map(|b| self.nodes[b.0].value.data()),
            stride,
            pad,
            out_sp,
            &mut data,
        );
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Conv3d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed 3D convolution; the exact adjoint of [`Tape::conv3d`] with
    /// the same weight tensor, laid out (c_in, c_out, k, k, k).
    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 5 || vw.rank() != 5 {
            return Err(VoxError::shape(format!(
                "conv_transpose3d expects rank-5 input and weight, got {:?} and {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        if stride == 0 {
            return Err(VoxError::config("conv_transpose3d stride must be >= 1"));
        }
        let (batch, c_in) = (vx.shape()[0], vx.shape()[1]);
        let in_sp = [vx.shape()[2], vx.shape()[3], vx.shape()[4]];
        let (wc_in, c_out) = (vw.shape()[0], vw.shape()[1]);
        let ks = [vw.shape()[2], vw.shape()[3], vw.shape()[4]];
        if wc_in != c_in {
            return Err(VoxError::shape(format!(
                "conv_transpose3d channel mismatch: input {:?} vs weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let mut out_sp = [0usize; 3];
        for i in 0..3 {
            out_sp[i] = conv::scatter_out_dim(in_sp[i], ks[i], stride, pad).ok_or_else(|| {
                VoxError::shape(format!(
                    "conv_transpose3d output collapses: input {:?}, kernel {:?}, pad {pad}",
                    in_sp, ks
                ))
            })?;
        }
        if let Some(b) = bias {
            let vb = &self.nodes[b.0].value;
            if vb.shape() != [c_out] {
                return Err(VoxError::shape(format!(
                    "conv_transpose3d bias shape {:?} does not match {c_out} output channels",
                    vb.shape()
                )));
            }
        }
        let out_shape = [batch, c_out, out_sp[0], out_sp[1], out_sp[2]];
        let mut data = vec![T::zero(); out_shape.iter().product()];
        conv::scatter(
            vx.data(),
            batch,
            c_in,
            in_sp,
            vw.data(),
            c_out,
            ks,
            stride,
            pad,
            out_sp,
            &mut data,
        );
        if let Some(b) = bias {
            let vb = self.nodes[b.0].value.data();
            let sp_vol: usize = out_sp.iter().product();
            for n in 0..batch {
                for c in 0..c_out {
                    let base = (n * c_out + c) * sp_vol;
                    for v in &mut data[base..base + sp_vol] {
                        *v += vb[c];
                    }
                }
            }
        }
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::ConvT3d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    // -- normalization / softmax ----------------------------------------------

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        if eps <= T::zero() {
            return Err(VoxError::config("layer_norm eps must be positive"));
        }
        let vx = &self.nodes[x.0].value;
        if vx.rank() == 0 {
            return Err(VoxError::shape("layer_norm needs rank >= 1 input"));
        }
        let e = *vx.shape().last().unwrap();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let v = &self.nodes[id.0].value;
            if v.shape() != [e] {
                return Err(VoxError::shape(format!(
                    "layer_norm {name} shape {:?} does not match last axis {e}",
                    v.shape()
                )));
            }
        }
        let rows = vx.numel() / e;
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.numel()];
        {
            let xd = vx.data();
            let gd = self.nodes[gamma.0].value.data();
            let bd = self.nodes[beta.0].value.data();
            let inv_e = T::one() / T::from_usize(e);
            for r in 0..rows {
                let row = &xd[r * e..(r + 1) * e];
                let mut mu = T::zero();
                for &v in row {
                    mu += v;
                }
                mu *= inv_e;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var *= inv_e;
                let istd = T::one() / (var + eps).sqrt();
                mean[r] = mu;
                inv_std[r] = istd;
                for i in 0..e {
                    data[r * e + i] = (row[i] - mu) * istd * gd[i] + bd[i];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(VoxError::shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                vx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let data = softmax_rows(vx.data(), outer, len, inner, false);
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(VoxError::shape(format!(
                "log_softmax axis {axis} out of range for shape {:?}",
                vx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let data = softmax_rows(vx.data(), outer, len, inner, true);
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::LogSoftmax { x, axis },
            rg,
        ))
    }

    // -- reductions / shape ----------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(acc), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::scalar(acc / T::from_usize(n)),
            Op::Mean(a),
            rg,
        )
    }

    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce_axes(a, axes, false)
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce_axes(a, axes, true)
    }

    fn reduce_axes(&mut self, a: NodeId, axes: &[usize], mean: bool) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank();
        let mut removed = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(VoxError::shape(format!(
                    "reduction axis {ax} out of range for shape {:?}",
                    va.shape()
                )));
            }
            if removed[ax] {
                return Err(VoxError::shape(format!("duplicate reduction axis {ax}")));
            }
            removed[ax] = true;
        }
        let (out_shape, out_strides) = reduction_strides(va.shape(), &removed);
        let count: usize = va
            .shape()
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let scale = if mean {
            T::one() / T::from_usize(count)
        } else {
            T::one()
        };
        let in_strides = strides_for(va.shape());
        let mut data = vec![T::zero(); out_shape.iter().product()];
        {
            let src = va.data();
            for_each2(va.shape(), &in_strides, &out_strides, |_, oi, oo| {
                data[oo] += src[oi];
            });
        }
        if mean {
            for v in &mut data {
                *v *= scale;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::SumAxes {
                x: a,
                removed,
                scale,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a.0].value.permuted(perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(VoxError::shape("concat of zero tensors"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(VoxError::shape(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (&d, &f))| i != axis && d != f)
            {
                return Err(VoxError::shape(format!(
                    "concat shapes incompatible along axis {axis}: {first:?} vs {s:?}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_block = axis_total * inner;
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut prefix = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let len = v.shape()[axis];
            let block = len * inner;
            let src = v.data();
            for o in 0..outer {
                let dst = o * out_block + prefix * inner;
                data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            prefix += len;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    // -- attention --------------------------------------------------------------

    /// Multi-head scaled dot-product attention over (B, T, E) tensors,
    /// built from tape primitives (no learned projections inside).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let qs = self.nodes[q.0].value.shape().to_vec();
        for (name, id) in [("k", k), ("v", v)] {
            let s = self.nodes[id.0].value.shape();
            if s != qs.as_slice() {
                return Err(VoxError::shape(format!(
                    "attention {name} shape {s:?} does not match q shape {qs:?}"
                )));
            }
        }
        if qs.len() != 3 {
            return Err(VoxError::shape(format!(
                "attention expects (B, T, E) tensors, got {qs:?}"
            )));
        }
        let (b, t, e) = (qs[0], qs[1], qs[2]);
        if heads == 0 || e % heads != 0 {
            return Err(VoxError::config(format!(
                "attention: embedding dim {e} not divisible by {heads} heads"
            )));
        }
        let d = e / heads;
        let split = |tape: &mut Self, id: NodeId| -> Result<NodeId> {
            let r = tape.reshape(id, &[b, t, heads, d])?;
            tape.permute(r, &[0, 2, 1, 3]) // (B, h, T, d)
        };
        let qh = split(self, q)?;
        let kh = split(self, k)?;
        let vh = split(self, v)?;
        let kt = self.permute(kh, &[0, 1, 3, 2])?; // (B, h, d, T)
        let scores = self.matmul(qh, kt)?; // (B, h, T, T)
        let scaled = self.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
        let attn = self.softmax(scaled, 3)?;
        let ctx = self.matmul(attn, vh)?; // (B, h, T, d)
        let merged = self.permute(ctx, &[0, 2, 1, 3])?; // (B, T, h, d)
        self.reshape(merged, &[b, t, e])
    }

    // -- backward -----------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf receives a
    /// gradient (zeros when unreachable).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(VoxError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for the caller
                    continue;
                }
                _ => self.propagate(i, &g, &mut grads)?,
            }
        }

        // unreachable-but-requested leaves get explicit zeros
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Borrow the gradient buffer for `id`, allocating zeros on first touch.
    /// Returns None when the node does not participate in differentiation.
    fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'a mut [T]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        Some(slot.as_mut().unwrap().data_mut())
    }

    fn propagate(&self, node: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[node].op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(self.nodes[node].op, Op::Sub(..));
                for (idx, id) in [a, b].into_iter().enumerate() {
                    let shape = self.nodes[id.0].value.shape().to_vec();
                    let st = bcast_strides(&shape, g.shape());
                    let nat = strides_for(g.shape());
                    let gd = g.data();
                    if let Some(buf) = self.grad_buf(grads, *id) {
                        let flip = negate && idx == 1;
                        for_each2(g.shape(), &nat, &st, |lin, _, o| {
                            if flip {
                                buf[o] -= gd[lin];
                            } else {
                                buf[o] += gd[lin];
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = self.pair_strides(*a, *b, g.shape());
                let gd = g.data();
                let bd = self.nodes[b.0].value.data();
                let ad = self.nodes[a.0].value.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for_each2(g.shape(), &sa, &sb, |lin, oa, ob| {
                        buf[oa] += gd[lin] * bd[ob];
                    });
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for_each2(g.shape(), &sa, &sb, |lin, oa, ob| {
                        buf[ob] += gd[lin] * ad[oa];
                    });
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = self.pair_strides(*a, *b, g.shape());
                let gd = g.data();
                let bd = self.nodes[b.0].value.data();
                let ad = self.nodes[a.0].value.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for_each2(g.shape(), &sa, &sb, |lin, oa, ob| {
                        buf[oa] += gd[lin] / bd[ob];
                    });
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for_each2(g.shape(), &sa, &sb, |lin, oa, ob| {
                        buf[ob] -= gd[lin] * ad[oa] / (bd[ob] * bd[ob]);
                    });
                }
            }
            Op::Neg(a) => {
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, gv) in buf.iter_mut().zip(gd) {
                        *o -= *gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, gv) in buf.iter_mut().zip(gd) {
                        *o += *c * *gv;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, gv) in buf.iter_mut().zip(gd) {
                        *o += *gv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let plan = matmul_plan(va.shape(), vb.shape())?;
                let MatmulPlan {
                    batch_shape,
                    a_strides,
                    b_strides,
                    m,
                    k,
                    n,
                } = plan;
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    let bd = vb.data();
                    for_each2(&batch_shape, &a_strides, &b_strides, |lin, oa, ob| {
                        mm_acc_nt(
                            &gd[lin * m * n..(lin + 1) * m * n],
                            &bd[ob..ob + k * n],
                            m,
                            n,
                            k,
                            &mut buf[oa..oa + m * k],
                        );
                    });
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    let ad = va.data();
                    for_each2(&batch_shape, &a_strides, &b_strides, |lin, oa, ob| {
                        mm_acc_tn(
                            &ad[oa..oa + m * k],
                            &gd[lin * m * n..(lin + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut buf[ob..ob + k * n],
                        );
                    });
                }
            }
            Op::Conv3d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (batch, c_in) = (vx.shape()[0], vx.shape()[1]);
                let in_sp = [vx.shape()[2], vx.shape()[3], vx.shape()[4]];
                let c_out = vw.shape()[0];
                let ks = [vw.shape()[2], vw.shape()[3], vw.shape()[4]];
                let out_sp = [g.shape()[2], g.shape()[3], g.shape()[4]];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    conv::scatter(
                        g.data(),
                        batch,
                        c_out,
                        out_sp,
                        vw.data(),
                        c_in,
                        ks,
                        *stride,
                        *pad,
                        in_sp,
                        buf,
                    );
                }
                if let Some(buf) = self.grad_buf(grads, *w) {
                    conv::weight_grad(
                        g.data(),
                        c_out,
                        out_sp,
                        vx.data(),
                        c_in,
                        in_sp,
                        batch,
                        ks,
                        *stride,
                        *pad,
                        buf,
                    );
                }
                if let Some(b) = bias {
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        conv::bias_grad(g.data(), batch, c_out, out_sp.iter().product(), buf);
                    }
                }
            }
            Op::ConvT3d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (batch, c_in) = (vx.shape()[0], vx.shape()[1]);
                let in_sp = [vx.shape()[2], vx.shape()[3], vx.shape()[4]];
                let c_out = vw.shape()[1];
                let ks = [vw.shape()[2], vw.shape()[3], vw.shape()[4]];
                let out_sp = [g.shape()[2], g.shape()[3], g.shape()[4]];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    conv::gather(
                        g.data(),
                        batch,
                        c_out,
                        out_sp,
                        vw.data(),
                        c_in,
                        ks,
                        None,
                        *stride,
                        *pad,
                        in_sp,
                        buf,
                    );
                }
                if let Some(buf) = self.grad_buf(grads, *w) {
                    conv::weight_grad(
                        vx.data(),
                        c_in,
                        in_sp,
                        g.data(),
                        c_out,
                        out_sp,
                        batch,
                        ks,
                        *stride,
                        *pad,
                        buf,
                    );
                }
                if let Some(b) = bias {
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        conv::bias_grad(g.data(), batch, c_out, out_sp.iter().product(), buf);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vx = &self.nodes[x.0].value;
                let e = *vx.shape().last().unwrap();
                let rows = vx.numel() / e;
                let xd = vx.data();
                let gd = self.nodes[gamma.0].value.data();
                let gl = g.data();
                let inv_e = T::one() / T::from_usize(e);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        let (mu, istd) = (mean[r], inv_std[r]);
                        let base = r * e;
                        let mut sum_gg = T::zero();
                        let mut sum_ggx = T::zero();
                        for i in 0..e {
                            let xh = (xd[base + i] - mu) * istd;
                            let gg = gl[base + i] * gd[i];
                            sum_gg += gg;
                            sum_ggx += gg * xh;
                        }
                        sum_gg *= inv_e;
                        sum_ggx *= inv_e;
                        for i in 0..e {
                            let xh = (xd[base + i] - mu) * istd;
                            let gg = gl[base + i] * gd[i];
                            buf[base + i] += (gg - sum_gg - xh * sum_ggx) * istd;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *gamma) {
                    for r in 0..rows {
                        let (mu, istd) = (mean[r], inv_std[r]);
                        let base = r * e;
                        for i in 0..e {
                            buf[i] += gl[base + i] * (xd[base + i] - mu) * istd;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *beta) {
                    for r in 0..rows {
                        let base = r * e;
                        for i in 0..e {
                            buf[i] += gl[base + i];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[x.0].value.shape(), *axis);
                let y = self.nodes[node].value.data();
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for a in 0..len {
                                let idx = base + a * inner;
                                dot += gd[idx] * y[idx];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                buf[idx] += y[idx] * (gd[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[x.0].value.shape(), *axis);
                let y = self.nodes[node].value.data(); // log-probs; exp gives softmax
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut gsum = T::zero();
                            for a in 0..len {
                                gsum += gd[base + a * inner];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                buf[idx] += gd[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LogClamped { x, eps } => {
                let xd = self.nodes[x.0].value.data();
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for i in 0..xd.len() {
                        if xd[i] > *eps {
                            buf[i] += gd[i] / xd[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xd = self.nodes[a.0].value.data();
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for i in 0..xd.len() {
                        buf[i] += gd[i] * gelu_bwd(xd[i]);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let xd = self.nodes[a.0].value.data();
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for i in 0..xd.len() {
                        let d = if xd[i] > T::zero() { T::one() } else { *slope };
                        buf[i] += gd[i] * d;
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let gv = g.item() / T::from_usize(n);
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::SumAxes { x, removed, scale } => {
                let vx = &self.nodes[x.0].value;
                let (_, out_strides) = reduction_strides(vx.shape(), removed);
                let in_strides = strides_for(vx.shape());
                let gd = g.data();
                let sc = *scale;
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for_each2(vx.shape(), &in_strides, &out_strides, |_, oi, oo| {
                        buf[oi] += gd[oo] * sc;
                    });
                }
            }
            Op::Reshape(a) => {
                let gd = g.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, gv) in buf.iter_mut().zip(gd) {
                        *o += *gv;
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gp = g.permuted(&inv)?;
                let gd = gp.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, gv) in buf.iter_mut().zip(gd) {
                        *o += *gv;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = g.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_block = out_shape[*axis] * inner;
                let gd = g.data();
                let mut prefix = 0usize;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    let block = len * inner;
                    if let Some(buf) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = o * out_block + prefix * inner;
                            let dst = o * block;
                            for j in 0..block {
                                buf[dst + j] += gd[src + j];
                            }
                        }
                    }
                    prefix += len;
                }
            }
        }
        Ok(())
    }

    fn pair_strides(&self, a: NodeId, b: NodeId, out: &[usize]) -> (Vec<usize>, Vec<usize>) {
        (
            bcast_strides(self.nodes[a.0].value.shape(), out),
            bcast_strides(self.nodes[b.0].value.shape(), out),
        )
    }
}
