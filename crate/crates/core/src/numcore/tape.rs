//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every op appends one node; a node's inputs always have smaller ids, so the
//! record is topologically ordered by construction and backward is a single
//! reverse sweep.

use std::rc::Rc;

use rand::Rng;

use super::kernels;
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout { x: Var, keep: Vec<f64> },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, idx: Rc<[usize]> },
    ScatterAdd { x: Var, idx: Rc<[usize]> },
    MaskedAbsSum { pred: Var, sign: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum",
            Op::Concat { .. } => "concat",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::MaskedAbsSum { .. } => "masked_abs_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nonfinite: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` is not on any path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_vec(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed raw gradient, `None` when unreachable.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar activations exposed for reference implementations and tests.
pub mod scalar {
    pub fn gelu(x: f64) -> f64 {
        super::gelu(x)
    }
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index of the broadcast source.
fn broadcast_offsets(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    if src == out_shape {
        return (0..numel).collect();
    }
    let src_numel: usize = src.iter().product();
    // suffix broadcast, e.g. a bias over leading axes
    let pad = out_shape.len() - src.len();
    if src.iter().zip(&out_shape[pad..]).all(|(s, o)| s == o) {
        return (0..numel).map(|i| i % src_numel).collect();
    }
    let src_strides = strides(src);
    let mut eff = vec![0; out_shape.len()];
    for (i, &d) in src.iter().enumerate() {
        eff[pad + i] = if d == 1 { 0 } else { src_strides[i] };
    }
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Split `shape` around `axis` into (outer, len, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    // walk the innermost output axis as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = eff[last];
    let mut idx = vec![0; rank];
    let mut base = 0usize;
    let outer = numel / run;
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..run {
            out.push(data[off]);
            off += run_stride;
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded entries.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First op (by name) that produced a non-finite value, if any.
    pub fn nonfinite_op(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(Error::Numeric(format!("non-finite output from `{op}`"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op.name().to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_acc(m, k, n, self.data(a), self.data(b), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b }, ng)
    }

    /// Applies `x @ w + b` over the last axis: `[..., in] x [in, out] -> [..., out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        assert!(
            sw.len() == 2 && !sx.is_empty() && sx[sx.len() - 1] == sw[0],
            "linear shape mismatch: input {sx:?}, weight {sw:?}"
        );
        let (fin, fout) = (sw[0], sw[1]);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[fout], "linear bias shape mismatch: weight {sw:?}, bias {:?}", self.shape(b));
        }
        let rows = self.value(x).numel() / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bias = self.data(b);
            for r in out.chunks_exact_mut(fout) {
                r.copy_from_slice(bias);
            }
        }
        kernels::mm_acc(rows, fin, fout, self.data(x), self.data(w), &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = fout;
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> (Tensor, bool) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("{name} shape mismatch: {sa:?} vs {sb:?}"));
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(sa, &shape);
            let ob = broadcast_offsets(sb, &shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        (Tensor::from_vec(&shape, out), self.ng(a) || self.ng(b))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y);
        self.push(t, Op::Add { a, b }, ng)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y);
        self.push(t, Op::Mul { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_vec(v.shape(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("layer_norm on a scalar");
        assert!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            "layer_norm shape mismatch: input {sx:?}, gamma {:?}, beta {:?}",
            self.shape(gamma),
            self.shape(beta)
        );
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_vec(&sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Inverted dropout. Outside training (or with `rate == 0`) returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        if !training || rate == 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let t = Tensor::from_vec(v.shape(), out);
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, keep }, ng)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(axis < sx.len(), "mean axis {axis} out of range for {sx:?}");
        let (outer, n, inner) = around(&sx, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sx;
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::Mean { x, axis }, ng)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            assert!(ok, "concat shape mismatch on axis {axis}: {first:?} vs {s:?}");
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.data(x)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len() && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        assert!(valid, "permute axes {axes:?} invalid for shape {sx:?}");
        let (out, shape) = permute_data(self.data(x), sx, axes);
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        )
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Var {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, v.numel(), "cannot reshape {:?} into {shape:?}", v.shape());
        let t = Tensor::from_vec(shape, v.data().to_vec());
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(
            axis < sx.len() && start + len <= sx[axis],
            "narrow [{start}, {}) on axis {axis} out of range for {sx:?}",
            start + len
        );
        let (outer, n, inner) = around(&sx, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::Narrow { x, axis, start }, ng)
    }

    /// Rows of `x` (axis 0) at `idx`, in order.
    pub fn index_select(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(!sx.is_empty(), "index_select on a scalar");
        let row: usize = sx[1..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            assert!(i < sx[0], "index_select index {i} out of range for {sx:?}");
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let mut shape = sx;
        shape[0] = idx.len();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::IndexSelect { x, idx }, ng)
    }

    /// `out[idx[r]] += x[r]` over axis 0, producing `rows` rows.
    pub fn scatter_add(&mut self, x: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(
            !sx.is_empty() && sx[0] == idx.len(),
            "scatter_add index length {} does not match input {sx:?}",
            idx.len()
        );
        let row: usize = sx[1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; rows * row];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < rows, "scatter_add target {i} out of range for {rows} rows");
            let src = &xd[r * row..(r + 1) * row];
            for (d, s) in out[i * row..(i + 1) * row].iter_mut().zip(src) {
                *d += s;
            }
        }
        let mut shape = sx;
        shape[0] = rows;
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::ScatterAdd { x, idx }, ng)
    }

    /// `sum(mask * |pred - target|)`. Entries with `mask == 0` are never read.
    pub fn masked_abs_sum(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Var {
        let sp = self.shape(pred);
        assert!(
            sp == target.shape() && sp == mask.shape(),
            "masked_abs_sum shape mismatch: pred {sp:?}, target {:?}, mask {:?}",
            target.shape(),
            mask.shape()
        );
        let pd = self.data(pred);
        let mut sign = vec![0.0; pd.len()];
        let mut total = 0.0;
        for i in 0..pd.len() {
            let m = mask.data()[i];
            if m != 0.0 {
                let diff = pd[i] - target.data()[i];
                total += m * diff.abs();
                sign[i] = if diff > 0.0 {
                    m
                } else if diff < 0.0 {
                    -m
                } else {
                    0.0
                };
            }
        }
        let ng = self.ng(pred);
        self.push(Tensor::scalar(total), Op::MaskedAbsSum { pred, sign }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.shape().iter().any(|&d| d != 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.check_finite()?;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::mm_abt_acc(m, n, k, g, self.data(*b), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::mm_atb_acc(m, k, n, self.data(*a), g, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (fin, fout) = (sw[0], sw[1]);
                let rows = g.len() / fout;
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::mm_abt_acc(rows, fout, fin, g, self.data(*w), gx);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::mm_atb_acc(rows, fin, fout, self.data(*x), g, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for r in g.chunks_exact(fout) {
                            for (d, s) in gb.iter_mut().zip(r) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    let sv = self.shape(v).to_vec();
                    if let Some(gv) = self.acc(grads, v) {
                        if sv == out.shape() {
                            gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                        } else {
                            for (o, &src) in broadcast_offsets(&sv, out.shape()).iter().enumerate() {
                                gv[src] += g[o];
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let sv = self.shape(v).to_vec();
                    let so = self.shape(other).to_vec();
                    let od = self.data(other);
                    if let Some(gv) = self.acc(grads, v) {
                        let ov = broadcast_offsets(&sv, out.shape());
                        let oo = broadcast_offsets(&so, out.shape());
                        for i in 0..g.len() {
                            gv[ov[i]] += g[i] * od[oo[i]];
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xd[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                let yd = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - yd[i] * yd[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yd = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.data(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, s)| *a += s);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * keep[i];
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = around(self.shape(*x), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    let inv = 1.0 / n as f64;
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = around(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if let Some(gx) = self.acc(grads, x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gx[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += n;
                }
            }
            Op::Permute { x, axes } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (back, _) = permute_data(g, out.shape(), &inverse);
                    gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = around(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::IndexSelect { x, idx } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * row..(r + 1) * row];
                        gx[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ScatterAdd { x, idx } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[i * row..(i + 1) * row];
                        gx[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::MaskedAbsSum { pred, sign } => {
                if let Some(gp) = self.acc(grads, *pred) {
                    gp.iter_mut().zip(sign).for_each(|(d, s)| *d += g[0] * s);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a_data = [1.0, -2.0, 3.5, 0.25, 4.0, -1.0, 2.0, 7.0, 0.0];
        let i = tape.constant(Tensor::eye(3));
        let a = tape.constant(t(&[3, 3], &a_data));
        let out = tape.matmul(i, a);
        assert_eq!(tape.value(out).data(), &a_data);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[5.0; 4]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b);
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, -2.0]));
        let ge = tape.gelu(x);
        let re = tape.relu(x);
        let sg = tape.sigmoid(x);
        assert_eq!(tape.value(ge).data()[0], 0.0);
        assert_eq!(tape.value(re).data()[1], 0.0);
        assert_eq!(tape.value(sg).data()[0], 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let th = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(th, th);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.wrt(th).item(), 6.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut tape = Tape::new();
        let th = tape.leaf(t(&[2], &[1.0, 2.0]));
        let other = tape.leaf(Tensor::scalar(4.0));
        let c = tape.scale(other, 2.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(th), Tensor::zeros(&[2]));
        assert_eq!(g.wrt(other).item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let th = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(th), Err(Error::Contract(_))));
    }

    #[test]
    fn nonfinite_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1e308, 1.0]));
        let y = tape.scale(x, 10.0);
        let s = tape.sum_all(y);
        assert_eq!(tape.nonfinite_op(), Some("scale"));
        assert!(matches!(tape.backward(s), Err(Error::Numeric(_))));
    }

    #[test]
    #[should_panic(expected = "[2, 3] x [2, 3]")]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        tape.matmul(a, a);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::ones(&[20000]));
        assert_eq!(tape.dropout(x, 0.3, false, &mut rng), x);
        let y = tape.dropout(x, 0.3, true, &mut rng);
        let d = tape.value(y).data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
        assert!((zeros - 0.3).abs() < 0.02, "zero fraction {zeros}");
        let scale = 1.0 / 0.7;
        assert!(d.iter().all(|&v| v == 0.0 || v == scale));
    }

    #[test]
    fn broadcast_add_matches_manual() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let b = tape.constant(t(&[2, 1, 2], &[100.0, 200.0, 300.0, 400.0]));
        let c = tape.add(a, b);
        let d = tape.value(c).data();
        assert_eq!(d[0], 100.0);
        assert_eq!(d[5], 205.0);
        assert_eq!(d[6], 306.0);
        assert_eq!(d[11], 411.0);
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]);
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]);
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
