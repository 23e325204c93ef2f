//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Nodes are
//! created in topological order by construction, so the backward sweep walks
//! the tape once from the end, visiting each node exactly once.
//!
//! Leaves are either parameters (gradients requested) or constants. Random
//! draws (masks, reparameterization noise) enter as constants, so gradients
//! only follow the continuous path.

use super::kernels;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose2, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MaskRows { x: Var, mask: Vec<f64> },
    Reshape(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    GaussianLogDensity { p: Var, mu: Var, sigma: Var },
    StdNormalLogDensity(Var),
    LogSumExp(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One graph per objective evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, graph: &Graph) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf (frozen weights, data, random draws).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x[m×k] · w[k×n] + b[n]` with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(dim_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, vs: &[Var]) -> Result<Var> {
        let first = *vs
            .first()
            .ok_or_else(|| Error::Argument("add_n of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &vs[1..] {
            self.same_shape("add_n", first, v)?;
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let rg = self.rg(vs);
        Ok(self.push(acc, Op::AddN(vs.to_vec()), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddConst(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        if !t.all_finite() {
            return Err(Error::Domain("exp overflowed".into()));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Exp(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "last extent {d} vs gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let inv = kernels::normalize_row(row, eps, &mut xhat[r * d..(r + 1) * d]);
            inv_std[r] = inv;
            for c in 0..d {
                out[r * d + c] = xhat[r * d + c] * g[c] + b[c];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err("transpose", format!("needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let t = Tensor::from_parts(vec![c, r], transpose2(self.value(a).data(), r, c));
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// Multi-head scaled dot-product self-attention over token rows.
    /// `q`, `k`, `v` are `[T×d]`; heads split the feature axis evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q);
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(dim_err(
                "attention",
                format!("shape {s:?} with {heads} heads"),
            ));
        }
        let (t, d) = (s[0], s[1]);
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            d,
            heads,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![t, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Stacks matrices along the row axis. All parts share the column extent.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err(
                    "concat_rows",
                    format!("part {s:?} vs width {cols}"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_leading(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// Multiplies leading-axis row `i` of `x` by `mask[i]`.
    pub fn mask_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        if mask.len() != lead {
            return Err(dim_err(
                "mask_rows",
                format!("mask length {} vs {lead} rows", mask.len()),
            ));
        }
        let inner = xv.len() / lead;
        let mut data = xv.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            for v in &mut data[r * inner..(r + 1) * inner] {
                *v *= m;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::MaskRows {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// `-log softmax(logits)[label]` over a flat logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits).data();
        if label >= lv.len() {
            return Err(Error::Index(format!(
                "label {label} out of range for {} classes",
                lv.len()
            )));
        }
        let probs = kernels::softmax(lv);
        let loss = -kernels::log_softmax_at(lv, label);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// `Σ_i log N(p_i | μ_i, σ_i²)`.
    pub fn gaussian_log_density(&mut self, p: Var, mu: Var, sigma: Var) -> Result<Var> {
        self.same_shape("gaussian_log_density", p, mu)?;
        self.same_shape("gaussian_log_density", p, sigma)?;
        let value = kernels::gaussian_log_density(
            self.value(p).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
        )?;
        let rg = self.rg(&[p, mu, sigma]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GaussianLogDensity { p, mu, sigma },
            rg,
        ))
    }

    /// `Σ_i log N(p_i | 0, 1)`.
    pub fn std_normal_log_density(&mut self, p: Var) -> Var {
        let pv = self.value(p).data();
        let value = -(pv.len() as f64) * HALF_LN_2PI - 0.5 * pv.iter().map(|x| x * x).sum::<f64>();
        let rg = self.rg(&[p]);
        self.push(Tensor::scalar(value), Op::StdNormalLogDensity(p), rg)
    }

    /// `log Σ exp(v_i)` over single-entry nodes.
    pub fn log_sum_exp(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::Argument("log_sum_exp of an empty list".into()));
        }
        let mut vals = Vec::with_capacity(vs.len());
        for &v in vs {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(dim_err("log_sum_exp", format!("non-scalar {:?}", t.shape())));
            }
            vals.push(t.item());
        }
        let value = kernels::log_sum_exp(&vals)?;
        let rg = self.rg(vs);
        Ok(self.push(Tensor::scalar(value), Op::LogSumExp(vs.to_vec()), rg))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(dim_err("backward", format!("root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &node.value, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn add_into(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64], c: f64) {
        self.accumulate(grads, v, |acc| {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += c * b;
            }
        });
    }

    fn propagate(&self, node: &Node, y: &Tensor, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| gemm_nt_acc(g, vb, acc, m, n, k));
                self.accumulate(grads, *b, |acc| gemm_tn_acc(va, g, acc, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |acc| gemm_nt_acc(g, vw, acc, m, n, k));
                self.accumulate(grads, *w, |acc| gemm_tn_acc(vx, g, acc, m, k, n));
                self.accumulate(grads, *b, |acc| {
                    for r in 0..m {
                        for (a, gv) in acc.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g, 1.0);
                self.add_into(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g, 1.0);
                self.add_into(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for ((o, gv), bv) in acc.iter_mut().zip(g).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((o, gv), av) in acc.iter_mut().zip(g).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddN(vs) => {
                for v in vs {
                    self.add_into(grads, *v, g, 1.0);
                }
            }
            Op::Scale(a, c) => self.add_into(grads, *a, g, *c),
            Op::AddConst(a) => self.add_into(grads, *a, g, 1.0),
            Op::Exp(a) => {
                let yv = y.data();
                self.accumulate(grads, *a, |acc| {
                    for ((o, gv), e) in acc.iter_mut().zip(g).zip(yv) {
                        *o += gv * e;
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for ((o, gv), &x) in acc.iter_mut().zip(g).zip(xv) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let rows = inv_std.len();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *x, |acc| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let inv = inv_std[r];
                        let dn = d as f64;
                        for c in 0..d {
                            acc[r * d + c] += inv / dn * (dn * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |acc| {
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |acc| {
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = transpose2(g, s[1], s[0]);
                self.add_into(grads, *a, &gt, 1.0);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = self.shape(*q);
                let (t, d) = (s[0], s[1]);
                let (dq, dk, dv) = kernels::attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    t,
                    d,
                    *heads,
                );
                self.add_into(grads, *q, &dq, 1.0);
                self.add_into(grads, *k, &dk, 1.0);
                self.add_into(grads, *v, &dv, 1.0);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.add_into(grads, *p, &g[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let inner = y.len() / y.shape()[0];
                let off = start * inner;
                self.accumulate(grads, *x, |acc| {
                    for (a, gv) in acc[off..off + g.len()].iter_mut().zip(g) {
                        *a += gv;
                    }
                });
            }
            Op::MaskRows { x, mask } => {
                let inner = y.len() / mask.len();
                self.accumulate(grads, *x, |acc| {
                    for (r, &m) in mask.iter().enumerate() {
                        for i in r * inner..(r + 1) * inner {
                            acc[i] += g[i] * m;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.add_into(grads, *x, g, 1.0),
            Op::SumAll(x) => {
                let gs = g[0];
                self.accumulate(grads, *x, |acc| acc.iter_mut().for_each(|a| *a += gs));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let gs = g[0];
                self.accumulate(grads, *logits, |acc| {
                    for (c, (a, p)) in acc.iter_mut().zip(probs).enumerate() {
                        let onehot = if c == *label { 1.0 } else { 0.0 };
                        *a += gs * (p - onehot);
                    }
                });
            }
            Op::GaussianLogDensity { p, mu, sigma } => {
                let gs = g[0];
                let (pv, mv, sv) = (
                    self.value(*p).data(),
                    self.value(*mu).data(),
                    self.value(*sigma).data(),
                );
                self.accumulate(grads, *p, |acc| {
                    for i in 0..acc.len() {
                        acc[i] -= gs * (pv[i] - mv[i]) / (sv[i] * sv[i]);
                    }
                });
                self.accumulate(grads, *mu, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gs * (pv[i] - mv[i]) / (sv[i] * sv[i]);
                    }
                });
                self.accumulate(grads, *sigma, |acc| {
                    for i in 0..acc.len() {
                        let z = (pv[i] - mv[i]) / sv[i];
                        acc[i] += gs * (z * z - 1.0) / sv[i];
                    }
                });
            }
            Op::StdNormalLogDensity(p) => {
                let gs = g[0];
                let pv = self.value(*p).data();
                self.accumulate(grads, *p, |acc| {
                    for (a, x) in acc.iter_mut().zip(pv) {
                        *a -= gs * x;
                    }
                });
            }
            Op::LogSumExp(vs) => {
                let gs = g[0];
                let out = y.item();
                for v in vs {
                    let w = (self.value(*v).item() - out).exp();
                    self.accumulate(grads, *v, |acc| acc[0] += gs * w);
                }
            }
        }
    }
}
