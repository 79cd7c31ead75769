//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends a node whose inputs are strictly earlier on the tape, so
//! the tape order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep. Binary elementwise ops accept equal shapes or a
//! single-element operand; no other broadcasting exists.

use std::f64::consts::PI;

use crate::error::{contract, dim_err, Error, Result};
use crate::kernels::{channel_major, col2im, gemm, im2col, sample_major, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{shape_str, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    AddBias(Var, Var),
    Sum(Var, Vec<usize>),
    LogSumExp(Var, usize),
    Conv2d(Var, Var, ConvGeom),
    Deconv2d(Var, Var, ConvGeom),
    PairwiseGaussian(Var, Var, Var),
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Adds the gradient of every node bound from `store` into its slot.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Some((uid, id)), Some(g)) = (node.param, g) {
                if uid == store.uid() {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() == b.shape() || a.is_scalar() || b.is_scalar() {
        Ok(())
    } else {
        dim_err(format!(
            "{op}: shapes {} and {} are incompatible",
            shape_str(a.shape()),
            shape_str(b.shape())
        ))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = if a.is_scalar() { b.shape() } else { a.shape() };
    let n = a.numel().max(b.numel());
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| f(ad[if ad.len() == 1 { 0 } else { i }], bd[if bd.len() == 1 { 0 } else { i }]))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("broadcast shape")
}

/// Gradient for an operand of a broadcast op: unchanged, or summed when the
/// operand was the broadcast scalar.
fn unbroadcast(operand: &Tensor, g: Tensor) -> Tensor {
    if operand.numel() == g.numel() {
        g
    } else {
        Tensor::scalar(g.data().iter().sum())
    }
}

/// Output shape and the input→output flat index map of a reduction.
fn reduction_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        let mut o = 0;
        for &a in &kept {
            o = o * shape[a] + idx[a];
        }
        map.push(o);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    (out_shape, map)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; its gradient is routed back by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some((store.uid(), id));
        v
    }

    /// Binds a parameter as a constant (gradients still flow to other inputs).
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let out = zip_broadcast(ta, tb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!(
                "matmul: cannot multiply {} by {}",
                shape_str(sa),
                shape_str(sb)
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err(format!("transpose needs a matrix, got {}", shape_str(s)));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return dim_err(format!(
                "slice_cols {start}..{} invalid for {}",
                start + len,
                shape_str(s)
            ));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols(a, start), rg))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return dim_err(format!(
                "add_bias: bias {} does not match channels of {}",
                shape_str(sb),
                shape_str(sx)
            ));
        }
        let (outer, ch, inner) = split_axis(sx, 1);
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[c];
                }
            }
        }
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    /// Sum over `axes` (removed from the shape). An empty axis list is the
    /// identity. Accumulation runs in increasing flat-index order.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return dim_err(format!("axis {bad} out of range for {}", shape_str(&shape)));
        }
        let (out_shape, map) = reduction_plan(&shape, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (x, &o) in self.value(a).data().iter().zip(&map) {
            out[o] += x;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Sum(a, axes), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes).expect("all axes valid")
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let count: usize = axes
            .iter()
            .filter(|&&ax| ax < shape.len())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .map(|&ax| shape[ax])
            .product();
        let s = self.sum(a, axes)?;
        Ok(if axes.is_empty() { s } else { self.scale(s, 1.0 / count as f64) })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `ln Σ exp` along one axis (removed from the shape).
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for {}", shape_str(&shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x[(o * len + j) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    s += (at(j) - m).exp();
                }
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|&(ax, _)| ax != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::LogSumExp(a, axis), rg))
    }

    /// Cross-correlation of `input` (N×C×H×W) with `kernel` (K×C×k×k).
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return dim_err(format!(
                "conv2d expects N×C×H×W input and square K×C×k×k kernel, got {} and {}",
                shape_str(&si),
                shape_str(&sk)
            ));
        }
        if si[1] != sk[1] {
            return dim_err(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                shape_str(&si),
                shape_str(&sk)
            ));
        }
        let g = ConvGeom::new(sk[2], stride, padding);
        let (n, c, h, w, kout) = (si[0], si[1], si[2], si[3], sk[0]);
        let (Some(oh), Some(ow)) = (g.conv_out(h), g.conv_out(w)) else {
            return dim_err(format!("conv2d kernel larger than padded input {}", shape_str(&si)));
        };
        let ckk = c * g.kernel * g.kernel;
        let l = oh * ow;
        let nl = n * l;
        let mut col = vec![0.0; ckk * nl];
        let mut out = vec![0.0; kout * nl];
        let x = self.value(input).data();
        let wk = self.value(kernel).data();
        for s in 0..n {
            im2col(&x[s * c * h * w..(s + 1) * c * h * w], c, h, w, g, oh, ow, &mut col, nl, s * l);
        }
        gemm(kout, ckk, nl, wk, false, &col, false, 0.0, &mut out);
        let out = sample_major(&out, n, kout, l);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(Tensor::new(vec![n, kout, oh, ow], out)?, Op::Conv2d(input, kernel, g), rg))
    }

    /// Transposed convolution of `input` (N×C×H×W) with `kernel` (C×K×k×k);
    /// the adjoint of [`Tape::conv2d`] with the same kernel and geometry.
    pub fn deconv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return dim_err(format!(
                "deconv2d expects N×C×H×W input and square C×K×k×k kernel, got {} and {}",
                shape_str(&si),
                shape_str(&sk)
            ));
        }
        if si[1] != sk[0] {
            return dim_err(format!(
                "deconv2d channel mismatch: input {} vs kernel {}",
                shape_str(&si),
                shape_str(&sk)
            ));
        }
        let g = ConvGeom::new(sk[2], stride, padding);
        let (n, cin, h, w, cout) = (si[0], si[1], si[2], si[3], sk[1]);
        let (Some(oh), Some(ow)) = (g.deconv_out(h), g.deconv_out(w)) else {
            return dim_err("deconv2d padding exceeds output extent");
        };
        if g.conv_out(oh) != Some(h) || g.conv_out(ow) != Some(w) {
            return dim_err(format!("deconv2d geometry {g:?} is not invertible for {}", shape_str(&si)));
        }
        let ckk = cout * g.kernel * g.kernel;
        let l = h * w;
        let nl = n * l;
        let mut col = vec![0.0; ckk * nl];
        let mut out = vec![0.0; n * cout * oh * ow];
        let x = channel_major(self.value(input).data(), n, cin, l);
        let wk = self.value(kernel).data();
        gemm(ckk, cin, nl, wk, true, &x, false, 0.0, &mut col);
        for s in 0..n {
            col2im(&col, cout, oh, ow, g, h, w, &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow], nl, s * l);
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(Tensor::new(vec![n, cout, oh, ow], out)?, Op::Deconv2d(input, kernel, g), rg))
    }

    /// `out[i, j, k] = ln N(z[i, k]; mu[j, k], exp(logvar[j, k]))` for
    /// `z` (N×d) and `mu`, `logvar` (M×d).
    pub fn pairwise_gaussian_log_density(&mut self, z: Var, mu: Var, logvar: Var) -> Result<Var> {
        let (sz, sm, sl) = (self.shape(z), self.shape(mu), self.shape(logvar));
        if sz.len() != 2 || sm.len() != 2 || sm != sl || sz[1] != sm[1] {
            return dim_err(format!(
                "pairwise density: z {} mu {} logvar {}",
                shape_str(sz),
                shape_str(sm),
                shape_str(sl)
            ));
        }
        let (n, m, d) = (sz[0], sm[0], sz[1]);
        let (zd, md, ld) = (self.value(z).data(), self.value(mu).data(), self.value(logvar).data());
        let ln2pi = (2.0 * PI).ln();
        let mut out = vec![0.0; n * m * d];
        for i in 0..n {
            for j in 0..m {
                for k in 0..d {
                    let diff = zd[i * d + k] - md[j * d + k];
                    let lv = ld[j * d + k];
                    out[(i * m + j) * d + k] = -0.5 * (ln2pi + lv + diff * diff * (-lv).exp());
                }
            }
        }
        let rg = self.rg(z) || self.rg(mu) || self.rg(logvar);
        Ok(self.push(Tensor::new(vec![n, m, d], out)?, Op::PairwiseGaussian(z, mu, logvar), rg))
    }

    /// `out[i, j] = ‖x[i] − y[j]‖²` for `x` (N×d), `y` (M×d).
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return dim_err(format!("pairwise distance: {} vs {}", shape_str(sx), shape_str(sy)));
        }
        let (n, m, d) = (sx[0], sy[0], sx[1]);
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = xd[i * d + k] - yd[j * d + k];
                    s += diff * diff;
                }
                out[i * m + j] = s;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::PairwiseSqDist(x, y), rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            visited += 1;
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, unbroadcast(val(*a), g.clone()));
                send(*b, unbroadcast(val(*b), g));
            }
            Op::Sub(a, b) => {
                send(*a, unbroadcast(val(*a), g.clone()));
                send(*b, unbroadcast(val(*b), g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.rg(*a) {
                    send(*a, unbroadcast(ta, zip_broadcast(&g, tb, |gi, bi| gi * bi)));
                }
                if self.rg(*b) {
                    send(*b, unbroadcast(tb, zip_broadcast(&g, ta, |gi, ai| gi * ai)));
                }
            }
            Op::AddScalar(a) => send(*a, g),
            Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
            Op::Exp(a) => send(*a, elementwise(val(*a), &|_, yi, gi| gi * yi)),
            Op::Log(a) => send(*a, elementwise(val(*a), &|xi, _, gi| gi / xi)),
            Op::Relu(a) => send(*a, elementwise(val(*a), &|xi, _, gi| if xi > 0.0 { gi } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                send(*a, elementwise(val(*a), &|xi, _, gi| if xi > 0.0 { gi } else { s * gi }))
            }
            Op::Sigmoid(a) => send(*a, elementwise(val(*a), &|_, yi, gi| gi * yi * (1.0 - yi))),
            Op::Softplus(a) => send(*a, elementwise(val(*a), &|xi, _, gi| gi * sigmoid(xi))),
            Op::Square(a) => send(*a, elementwise(val(*a), &|xi, _, gi| 2.0 * xi * gi)),
            Op::Abs(a) => send(*a, elementwise(val(*a), &|xi, _, gi| gi * sign0(xi))),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut ga);
                    send(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut gb);
                    send(*b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g.data()[j * r + i];
                    }
                }
                send(*a, Tensor::new(vec![r, c], out)?);
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
            Op::SliceCols(a, start) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let len = g.shape()[1];
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                send(*a, Tensor::new(vec![r, c], out)?);
            }
            Op::AddBias(x, b) => {
                if self.rg(*b) {
                    let (outer, ch, inner) = split_axis(val(*x).shape(), 1);
                    let mut gb = vec![0.0; ch];
                    for o in 0..outer {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let base = (o * ch + c) * inner;
                            for v in &g.data()[base..base + inner] {
                                *acc += v;
                            }
                        }
                    }
                    send(*b, Tensor::new(vec![ch], gb)?);
                }
                send(*x, g);
            }
            Op::Sum(a, axes) => {
                let shape = val(*a).shape();
                let (_, map) = reduction_plan(shape, axes);
                let data = map.iter().map(|&o| g.data()[o]).collect();
                send(*a, Tensor::new(shape.to_vec(), data)?);
            }
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut out = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (yo, go) = (y.data()[o * inner + i], g.data()[o * inner + i]);
                        for j in 0..len {
                            let at = (o * len + j) * inner + i;
                            out[at] = go * (x.data()[at] - yo).exp();
                        }
                    }
                }
                send(*a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::Conv2d(input, kernel, geom) => {
                let (x, wk) = (val(*input), val(*kernel));
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (kout, oh, ow) = (y.shape()[1], y.shape()[2], y.shape()[3]);
                let ckk = c * geom.kernel * geom.kernel;
                let l = oh * ow;
                let nl = n * l;
                let gcm = channel_major(g.data(), n, kout, l);
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; wk.numel()];
                if self.rg(*kernel) {
                    let mut col = vec![0.0; ckk * nl];
                    for s in 0..n {
                        let img = &x.data()[s * c * h * w..(s + 1) * c * h * w];
                        im2col(img, c, h, w, *geom, oh, ow, &mut col, nl, s * l);
                    }
                    gemm(kout, nl, ckk, &gcm, false, &col, true, 0.0, &mut gw);
                }
                if self.rg(*input) {
                    let mut dcol = vec![0.0; ckk * nl];
                    gemm(ckk, kout, nl, wk.data(), true, &gcm, false, 0.0, &mut dcol);
                    for s in 0..n {
                        col2im(&dcol, c, h, w, *geom, oh, ow, &mut gx[s * c * h * w..(s + 1) * c * h * w], nl, s * l);
                    }
                }
                send(*input, Tensor::new(x.shape().to_vec(), gx)?);
                send(*kernel, Tensor::new(wk.shape().to_vec(), gw)?);
            }
            Op::Deconv2d(input, kernel, geom) => {
                let (x, wk) = (val(*input), val(*kernel));
                let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (cout, oh, ow) = (y.shape()[1], y.shape()[2], y.shape()[3]);
                let ckk = cout * geom.kernel * geom.kernel;
                let l = h * w;
                let nl = n * l;
                let mut dcol = vec![0.0; ckk * nl];
                for s in 0..n {
                    let gs = &g.data()[s * cout * oh * ow..(s + 1) * cout * oh * ow];
                    im2col(gs, cout, oh, ow, *geom, h, w, &mut dcol, nl, s * l);
                }
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; wk.numel()];
                if self.rg(*input) {
                    let mut gcm = vec![0.0; cin * nl];
                    gemm(cin, ckk, nl, wk.data(), false, &dcol, false, 0.0, &mut gcm);
                    gx = sample_major(&gcm, n, cin, l);
                }
                if self.rg(*kernel) {
                    let xcm = channel_major(x.data(), n, cin, l);
                    gemm(cin, nl, ckk, &xcm, false, &dcol, true, 0.0, &mut gw);
                }
                send(*input, Tensor::new(x.shape().to_vec(), gx)?);
                send(*kernel, Tensor::new(wk.shape().to_vec(), gw)?);
            }
            Op::PairwiseGaussian(z, mu, logvar) => {
                let (zt, mt, lt) = (val(*z), val(*mu), val(*logvar));
                let (n, m, d) = (zt.shape()[0], mt.shape()[0], zt.shape()[1]);
                let (zd, md, ld) = (zt.data(), mt.data(), lt.data());
                let mut gz = vec![0.0; n * d];
                let mut gm = vec![0.0; m * d];
                let mut gl = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        for k in 0..d {
                            let gi = g.data()[(i * m + j) * d + k];
                            let diff = zd[i * d + k] - md[j * d + k];
                            let prec = (-ld[j * d + k]).exp();
                            gz[i * d + k] -= gi * diff * prec;
                            gm[j * d + k] += gi * diff * prec;
                            gl[j * d + k] += gi * 0.5 * (diff * diff * prec - 1.0);
                        }
                    }
                }
                send(*z, Tensor::new(vec![n, d], gz)?);
                send(*mu, Tensor::new(vec![m, d], gm)?);
                send(*logvar, Tensor::new(vec![m, d], gl)?);
            }
            Op::PairwiseSqDist(x, yv) => {
                let (xt, yt) = (val(*x), val(*yv));
                let (n, m, d) = (xt.shape()[0], yt.shape()[0], xt.shape()[1]);
                let mut gx = vec![0.0; n * d];
                let mut gy = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gi = g.data()[i * m + j];
                        for k in 0..d {
                            let diff = 2.0 * gi * (xt.data()[i * d + k] - yt.data()[j * d + k]);
                            gx[i * d + k] += diff;
                            gy[j * d + k] -= diff;
                        }
                    }
                }
                send(*x, Tensor::new(vec![n, d], gx)?);
                send(*yv, Tensor::new(vec![m, d], gy)?);
            }
        }
        Ok(())
    }
}

/// Sign with the subgradient 0 at 0.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
