//! Tape-based reverse-mode differentiation over the primitive set used by the
//! model, the condensation losses and server training.
//!
//! A [`Tape`] owns every value computed on it. Operations append a node and
//! return a [`Var`] handle; [`Tape::backward`] walks the nodes in exact reverse
//! order and accumulates gradients. Nodes whose inputs are all constants are
//! never visited, so forward passes over fixed weights (real-data features
//! during condensation) cost nothing on the way back.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// The primitive operations, for callers that dispatch generically.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `x[n,in] · w[out,in]ᵀ + b[out]`
    Affine,
    /// 3×3 kernels, stride 1, zero padding 1: `x[n,ci,h,w]`, `w[co,ci,3,3]`, `b[co]`.
    Conv2d,
    Relu,
    AvgPool2x2,
    Flatten,
    MeanOverAxis(usize),
    SoftmaxWithTemperature(f32),
    /// Mean cross-entropy of `logits[n,c]` against the given labels.
    CrossEntropy(Vec<usize>),
    /// `Σ (a − b)²` as a scalar.
    SquaredL2,
    /// `Σ cᵢ sᵢ` over scalar inputs.
    ScalarCombine(Vec<f32>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize },
    Relu { x: usize },
    AvgPool2x2 { x: usize },
    Reshape { x: usize },
    MeanOverAxis { x: usize, outer: usize, axis: usize, inner: usize },
    Softmax { x: usize, tau: f32 },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    SquaredL2 { a: usize, b: usize },
    ScalarCombine { terms: Vec<(usize, f32)> },
    SlicedWasserstein { u: usize, v: usize, pairs: Vec<SwdPair>, p: f32, projections: Tensor },
    SymmetricKl { reference: Tensor, t: usize },
    StackRows { inputs: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
struct SwdPair {
    projection: usize,
    u_row: usize,
    v_row: usize,
    /// `weight · p · |Δ|^(p−1) · sign(Δ)` for `Δ = ⟨θ,u⟩ − ⟨θ,v⟩`.
    slope: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable_leaf: bool,
}

/// Records executed primitives for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf. Leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.tape {
            return Err(Error::UnknownLeaf);
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref()).ok_or(Error::UnknownLeaf)
    }
}

/// Probability floor applied before taking logarithms in KL terms.
pub const KL_FLOOR: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, op_name: &'static str) -> Result<Var> {
        value.check_finite(op_name)?;
        self.nodes.push(Node { value, op, requires_grad, trainable_leaf: false });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::UnknownLeaf);
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records an input tensor. Trainable leaves receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable, trainable_leaf: trainable });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    /// Generic entry point over [`Primitive`].
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{prim:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match &prim {
            Primitive::Affine => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Conv2d => {
                arity(3)?;
                self.conv2d(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Primitive::AvgPool2x2 => {
                arity(1)?;
                self.avgpool2x2(inputs[0])
            }
            Primitive::Flatten => {
                arity(1)?;
                self.flatten(inputs[0])
            }
            Primitive::MeanOverAxis(axis) => {
                arity(1)?;
                self.mean_over_axis(inputs[0], *axis)
            }
            Primitive::SoftmaxWithTemperature(tau) => {
                arity(1)?;
                self.softmax(inputs[0], *tau)
            }
            Primitive::CrossEntropy(labels) => {
                arity(1)?;
                self.cross_entropy(inputs[0], labels)
            }
            Primitive::SquaredL2 => {
                arity(2)?;
                self.squared_l2(inputs[0], inputs[1])
            }
            Primitive::ScalarCombine(coeffs) => {
                if coeffs.len() != inputs.len() {
                    return Err(Error::InvalidArgument("one coefficient per scalar input".into()));
                }
                let terms: Vec<(Var, f32)> = inputs.iter().copied().zip(coeffs.iter().copied()).collect();
                self.scalar_combine(&terms)
            }
        }
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (x, w, b) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(shape_err("affine", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let bias = self.val(b).data();
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm_nt(self.val(x).data(), self.val(w).data(), &mut out, n, din, dout);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, dout], out)?, Op::Affine { x, w, b }, rg, "affine")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (x, w, b) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let hw = h * wd;
        let k = ci * 9;
        let mut out = vec![0.0f32; n * co * hw];
        let mut cols = vec![0.0f32; k * hw];
        let (xd, wdat, bd) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        for s in 0..n {
            im2col(&xd[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, &mut cols);
            let o = &mut out[s * co * hw..(s + 1) * co * hw];
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bd[c]);
            }
            gemm_nn(wdat, &cols, o, co, k, hw);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, co, h, wd], out)?, Op::Conv2d { x, w, b }, rg, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let out = self.val(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("avgpool2x2", format!("x {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.val(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    dst[i * ow + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool2x2 { x }, rg, "avgpool2x2")
    }

    /// `[n, ...] -> [n, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let xs = self.val(x).shape();
        let n = xs[0];
        let rest = self.val(x).len() / n;
        let out = self.val(x).clone().reshape(&[n, rest])?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg, "flatten")
    }

    /// Mean over one axis; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let xs = self.val(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(shape_err("mean_over_axis", format!("axis {axis} of {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.val(x).data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    acc[o * inner + i] += xd[base + i] as f64;
                }
            }
        }
        let out: Vec<f32> = acc.iter().map(|&s| (s / len as f64) as f32).collect();
        let mut shape: Vec<usize> = xs.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::MeanOverAxis { x, outer, axis: len, inner }, rg, "mean_over_axis")
    }

    /// Row-wise `exp(zᵢ/τ) / Σⱼ exp(zⱼ/τ)` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: f32) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let x = self.idx(x)?;
        let t = self.val(x);
        let c = *t.shape().last().unwrap();
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            softmax_row(row, tau, &mut out);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, tau }, rg, "softmax_with_temperature")
    }

    /// Mean cross-entropy, fused with log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.idx(logits)?;
        let t = self.val(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(shape_err("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let c = s[1];
        let mut total = 0.0f64;
        for (row, &y) in t.data().chunks(c).zip(labels) {
            total += log_sum_exp(row) - row[y] as f64;
        }
        let loss = (total / labels.len() as f64) as f32;
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec() }, rg, "cross_entropy")
    }

    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("squared_l2", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        }).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s as f32), Op::SquaredL2 { a, b }, rg, "squared_l2")
    }

    pub fn scalar_combine(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut s = 0.0f64;
        let mut rg = false;
        for &(v, c) in terms {
            let i = self.idx(v)?;
            if !self.val(i).is_scalar() {
                return Err(shape_err("scalar_combine", format!("input shape {:?}", self.val(i).shape())));
            }
            s += c as f64 * self.val(i).item() as f64;
            rg |= self.rg(i);
            idx.push((i, c));
        }
        self.push(Tensor::scalar(s as f32), Op::ScalarCombine { terms: idx }, rg, "scalar_combine")
    }

    /// Sliced p-Wasserstein distance between the row sets `u[n,d]` and `v[m,d]`
    /// along the given unit directions `projections[L,d]`:
    /// `( (1/L) Σ_l W_pᵖ(⟨θ_l,u⟩, ⟨θ_l,v⟩) )^(1/p)`, with the 1-D distance between
    /// empirical distributions computed by matching sorted quantiles.
    pub fn sliced_wasserstein(&mut self, u: Var, v: Var, projections: &Tensor, p: f32) -> Result<Var> {
        let (u, v) = (self.idx(u)?, self.idx(v)?);
        let (tu, tv) = (self.val(u), self.val(v));
        let (Some((n, d)), Some((m, dv))) = (point_set(tu), point_set(tv)) else {
            return Err(shape_err("sliced_wasserstein", "expected rank-1 or rank-2 point sets"));
        };
        if projections.shape().len() != 2 || dv != d || projections.shape()[1] != d {
            return Err(shape_err(
                "sliced_wasserstein",
                format!("u {:?}, v {:?}, projections {:?}", tu.shape(), tv.shape(), projections.shape()),
            ));
        }
        if p < 1.0 || !p.is_finite() {
            return Err(Error::InvalidArgument(format!("exponent p must be >= 1, got {p}")));
        }
        let l = projections.shape()[0];
        let p64 = p as f64;
        let mut total = 0.0f64;
        let mut pairs = Vec::new();
        let mut pu = vec![0.0f64; n];
        let mut pv = vec![0.0f64; m];
        for li in 0..l {
            let theta = projections.row(li);
            project(tu.data(), d, theta, &mut pu);
            project(tv.data(), d, theta, &mut pv);
            let mut ou: Vec<usize> = (0..n).collect();
            let mut ov: Vec<usize> = (0..m).collect();
            ou.sort_by(|&a, &b| pu[a].total_cmp(&pu[b]).then(a.cmp(&b)));
            ov.sort_by(|&a, &b| pv[a].total_cmp(&pv[b]).then(a.cmp(&b)));
            // Walk the merged quantile breakpoints i/n and j/m.
            let (mut i, mut j) = (0usize, 0usize);
            let mut prev = 0.0f64;
            while i < n && j < m {
                let next_i = (i + 1) as f64 / n as f64;
                let next_j = (j + 1) as f64 / m as f64;
                let next = next_i.min(next_j);
                let weight = next - prev;
                let delta = pu[ou[i]] - pv[ov[j]];
                let a = delta.abs();
                total += weight * a.powf(p64);
                let slope = if a > 0.0 { weight * p64 * a.powf(p64 - 1.0) * delta.signum() } else { 0.0 };
                pairs.push(SwdPair { projection: li, u_row: ou[i], v_row: ov[j], slope });
                prev = next;
                // Advance whichever quantile boundary was reached (both on ties).
                let adv_i = (next_i - next).abs() <= f64::EPSILON * 4.0;
                let adv_j = (next_j - next).abs() <= f64::EPSILON * 4.0;
                if adv_i {
                    i += 1;
                }
                if adv_j {
                    j += 1;
                }
            }
        }
        let mean = total / l as f64;
        let value = mean.powf(1.0 / p64);
        // d value / d mean, folded into the stored slopes at backward time.
        let rg = self.rg(u) || self.rg(v);
        let out = Tensor::scalar(value as f32);
        self.push(
            out,
            Op::SlicedWasserstein { u, v, pairs, p, projections: projections.clone() },
            rg,
            "sliced_wasserstein",
        )
    }

    /// Mean over rows of `½(KL(r‖t) + KL(t‖r))` where `reference` holds constant
    /// distributions `r` and `t` is a differentiable `[rows, C]` probability table.
    /// Both sides are clamped to [`KL_FLOOR`] and renormalized before the logs.
    pub fn symmetric_kl(&mut self, reference: &Tensor, t: Var) -> Result<Var> {
        let t = self.idx(t)?;
        let tt = self.val(t);
        if tt.shape() != reference.shape() || tt.shape().len() != 2 {
            return Err(shape_err("symmetric_kl", format!("{:?} vs {:?}", reference.shape(), tt.shape())));
        }
        let c = tt.shape()[1];
        let rows = tt.shape()[0];
        let mut total = 0.0f64;
        for (rr, tr) in reference.data().chunks(c).zip(tt.data().chunks(c)) {
            let r = floor_normalize(rr);
            let q = floor_normalize(tr);
            total += 0.5 * symmetric_kl_row(&r, &q);
        }
        let out = Tensor::scalar((total / rows as f64) as f32);
        let rg = self.rg(t);
        self.push(out, Op::SymmetricKl { reference: reference.clone(), t }, rg, "symmetric_kl")
    }

    /// Stacks equally sized tensors as the rows of a `[k, len]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let idx = rows.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or(Error::EmptySet)?;
        let len = self.val(first).len();
        let mut data = Vec::with_capacity(len * idx.len());
        let mut rg = false;
        for &i in &idx {
            if self.val(i).len() != len {
                return Err(shape_err("stack_rows", format!("{:?} vs {:?}", self.val(first).shape(), self.val(i).shape())));
            }
            data.extend_from_slice(self.val(i).data());
            rg |= self.rg(i);
        }
        let out = Tensor::new(vec![idx.len(), len], data)?;
        self.push(out, Op::StackRows { inputs: idx }, rg, "stack_rows")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = self.val(li);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(li) {
            grads[li] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=li).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if node.trainable_leaf {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable_leaf {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.val(x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.val(w).shape()[0];
                if self.rg(x) {
                    let mut dx = vec![0.0; n * din];
                    gemm_nn(gd, self.val(w).data(), &mut dx, n, dout, din);
                    accumulate(grads, x, self.val(x).shape(), &dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm_tn(gd, self.val(x).data(), &mut dw, dout, n, din);
                    accumulate(grads, w, self.val(w).shape(), &dw);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, self.val(b).shape(), &db);
                }
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.val(x).shape();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = self.val(w).shape()[0];
                let hw = h * wd;
                let k = ci * 9;
                let xd = self.val(x).data();
                let wdat = self.val(w).data();
                let mut cols = vec![0.0f32; k * hw];
                let mut dcols = vec![0.0f32; k * hw];
                let mut dx = if self.rg(x) { vec![0.0f32; xd.len()] } else { Vec::new() };
                let mut dw = if self.rg(w) { vec![0.0f32; wdat.len()] } else { Vec::new() };
                let mut db = vec![0.0f32; co];
                for s in 0..n {
                    let go = &gd[s * co * hw..(s + 1) * co * hw];
                    if self.rg(w) {
                        im2col(&xd[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, &mut cols);
                        gemm_nt(go, &cols, &mut dw, co, hw, k);
                    }
                    if self.rg(x) {
                        dcols.fill(0.0);
                        gemm_tn(wdat, go, &mut dcols, k, co, hw);
                        col2im(&dcols, ci, h, wd, &mut dx[s * ci * hw..(s + 1) * ci * hw]);
                    }
                    for (c, chunk) in go.chunks(hw).enumerate() {
                        db[c] += chunk.iter().sum::<f32>();
                    }
                }
                if self.rg(x) {
                    accumulate(grads, x, xs, &dx);
                }
                if self.rg(w) {
                    accumulate(grads, w, self.val(w).shape(), &dw);
                }
                if self.rg(b) {
                    accumulate(grads, b, self.val(b).shape(), &db);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = self.val(*x).data().iter().zip(gd).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *x, self.val(*x).shape(), &dx);
            }
            Op::AvgPool2x2 { x } => {
                let xs = self.val(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; n * c * h * w];
                for plane in 0..n * c {
                    let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = 0.25 * src[i * ow + j];
                            let r0 = 2 * i * w + 2 * j;
                            dst[r0] += v;
                            dst[r0 + 1] += v;
                            dst[r0 + w] += v;
                            dst[r0 + w + 1] += v;
                        }
                    }
                }
                accumulate(grads, *x, xs, &dx);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.val(*x).shape(), gd);
            }
            Op::MeanOverAxis { x, outer, axis, inner } => {
                let (outer, len, inner) = (*outer, *axis, *inner);
                let scale = 1.0 / len as f32;
                let mut dx = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                accumulate(grads, *x, self.val(*x).shape(), &dx);
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for k in 0..c {
                        dr[k] = ((yr[k] as f64 * (gr[k] as f64 - dot)) / *tau as f64) as f32;
                    }
                }
                accumulate(grads, *x, self.val(*x).shape(), &dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.val(*logits);
                let c = t.shape()[1];
                let n = labels.len();
                let scale = gd[0] as f64 / n as f64;
                let mut dx = Vec::with_capacity(t.len());
                let mut probs = Vec::with_capacity(c);
                for (row, &y) in t.data().chunks(c).zip(labels) {
                    probs.clear();
                    softmax_row(row, 1.0, &mut probs);
                    for (k, &pk) in probs.iter().enumerate() {
                        let target = if k == y { 1.0 } else { 0.0 };
                        dx.push(((pk as f64 - target) * scale) as f32);
                    }
                }
                accumulate(grads, *logits, t.shape(), &dx);
            }
            Op::SquaredL2 { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let s = 2.0 * gd[0];
                let diff: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| s * (x - y)).collect();
                if self.rg(*a) {
                    accumulate(grads, *a, ta.shape(), &diff);
                }
                if self.rg(*b) {
                    let neg: Vec<f32> = diff.iter().map(|v| -v).collect();
                    accumulate(grads, *b, tb.shape(), &neg);
                }
            }
            Op::ScalarCombine { terms } => {
                for &(t, c) in terms {
                    if self.rg(t) {
                        accumulate(grads, t, &[1], &[c * gd[0]]);
                    }
                }
            }
            Op::SlicedWasserstein { u, v, pairs, p, projections } => {
                let value = node.value.item() as f64;
                if value <= 0.0 {
                    return Ok(());
                }
                let p = *p as f64;
                let l = projections.shape()[0] as f64;
                // value = mean^(1/p), d value / d mean = value^(1-p) / p
                let outer = gd[0] as f64 * value.powf(1.0 - p) / p / l;
                let d = projections.shape()[1];
                let mut du = vec![0.0f64; self.val(*u).len()];
                let mut dv = vec![0.0f64; self.val(*v).len()];
                for pair in pairs {
                    let theta = projections.row(pair.projection);
                    let s = outer * pair.slope;
                    for k in 0..d {
                        du[pair.u_row * d + k] += s * theta[k] as f64;
                        dv[pair.v_row * d + k] -= s * theta[k] as f64;
                    }
                }
                if self.rg(*u) {
                    let du: Vec<f32> = du.iter().map(|&x| x as f32).collect();
                    accumulate(grads, *u, self.val(*u).shape(), &du);
                }
                if self.rg(*v) {
                    let dv: Vec<f32> = dv.iter().map(|&x| x as f32).collect();
                    accumulate(grads, *v, self.val(*v).shape(), &dv);
                }
            }
            Op::SymmetricKl { reference, t } => {
                let tt = self.val(*t);
                let c = tt.shape()[1];
                let rows = tt.shape()[0] as f64;
                let scale = gd[0] as f64 * 0.5 / rows;
                let mut dt = Vec::with_capacity(tt.len());
                for (rr, tr) in reference.data().chunks(c).zip(tt.data().chunks(c)) {
                    let r = floor_normalize(rr);
                    let z: f64 = tr.iter().map(|&x| (x as f64).max(KL_FLOOR)).sum();
                    let q: Vec<f64> = tr.iter().map(|&x| (x as f64).max(KL_FLOOR) / z).collect();
                    // d/dq of Σ (r − q)(ln r − ln q)
                    let gq: Vec<f64> = q.iter().zip(&r).map(|(&qk, &rk)| qk.ln() - rk.ln() - rk / qk + 1.0).collect();
                    let dot: f64 = gq.iter().zip(&q).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        let active = tr[k] as f64 >= KL_FLOOR;
                        let v = if active { scale * (gq[k] - dot) / z } else { 0.0 };
                        dt.push(v as f32);
                    }
                }
                accumulate(grads, *t, tt.shape(), &dt);
            }
            Op::StackRows { inputs } => {
                for (r, &i) in inputs.iter().enumerate() {
                    if self.rg(i) {
                        let len = self.val(i).len();
                        accumulate(grads, i, self.val(i).shape(), &gd[r * len..(r + 1) * len]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, shape: &[usize], delta: &[f32]) {
    match &mut grads[i] {
        Some(g) => {
            for (a, &d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

fn project(points: &[f32], d: usize, theta: &[f32], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(points.chunks(d)) {
        *o = row.iter().zip(theta).map(|(&a, &b)| a as f64 * b as f64).sum();
    }
}

/// `(points, dim)` of a rank-1 (single point) or rank-2 point set.
fn point_set(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [d] => Some((1, *d)),
        [n, d] => Some((*n, *d)),
        _ => None,
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    m + row.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f32], tau: f32, out: &mut Vec<f32>) {
    let tau = tau as f64;
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&v| ((v as f64 - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    // Floored so that probabilities stay strictly positive when exp underflows.
    out.extend(e.iter().map(|&x| ((x / z) as f32).max(f32::MIN_POSITIVE)));
}

pub(crate) fn floor_normalize(row: &[f32]) -> Vec<f64> {
    let clamped: Vec<f64> = row.iter().map(|&x| (x as f64).max(KL_FLOOR)).collect();
    let z: f64 = clamped.iter().sum();
    clamped.into_iter().map(|x| x / z).collect()
}

/// `KL(r‖q) + KL(q‖r)` written as `Σ (r − q)(ln r − ln q)`, which is symmetric term by term.
pub(crate) fn symmetric_kl_row(r: &[f64], q: &[f64]) -> f64 {
    r.iter().zip(q).map(|(&a, &b)| (a - b) * (a.ln() - b.ln())).sum()
}

/// Unfolds a `[ci,h,w]` plane stack into `[ci*9, h*w]` columns for a padded 3×3 kernel.
fn im2col(x: &[f32], ci: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        dst[j] = if sj < 0 || sj >= w as isize { 0.0 } else { src[sj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], ci: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj >= 0 && sj < w as isize {
                            plane[si as usize * w + sj as usize] += row[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0])).unwrap();
        assert!(matches!(tape.softmax(x, 0.0), Err(Error::InvalidArgument(_))));
        assert!(tape.softmax(x, -1.0).is_err());
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn avgpool_of_constant_plane() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 3.5)).unwrap();
        let y = tape.avgpool2x2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn avgpool_floors_odd_sizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 7, 7], 1.0)).unwrap();
        let y = tape.avgpool2x2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true).unwrap();
        let zero = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = tape.squared_l2(x, zero).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let w = tape.constant(Tensor::zeros(&[4, 5])).unwrap();
        let b = tape.constant(Tensor::zeros(&[4])).unwrap();
        match tape.affine(x, w, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "affine");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[3.0e38])).unwrap();
        let z = tape.constant(t(&[1], &[-3.0e38])).unwrap();
        assert!(matches!(tape.squared_l2(a, z), Err(Error::NumericOverflow { op: "squared_l2" })));
        assert!(matches!(tape.leaf(t(&[1], &[f32::NAN]), true), Err(Error::NumericOverflow { .. })));
    }

    #[test]
    fn backward_requires_scalar_and_known_leaf() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));

        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::zeros(&[1]), true).unwrap();
        let z = tape.constant(Tensor::zeros(&[2])).unwrap();
        let loss = tape.squared_l2(x, z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(matches!(g.get(foreign), Err(Error::UnknownLeaf)));
        assert!(matches!(tape.backward(foreign), Err(Error::UnknownLeaf)));
    }

    #[test]
    fn unused_trainable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]), true).unwrap();
        let unused = tape.leaf(Tensor::full(&[2, 2], 5.0), true).unwrap();
        let z = tape.constant(t(&[1], &[0.0])).unwrap();
        let loss = tape.squared_l2(x, z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn apply_dispatches_primitives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let y = tape.apply(Primitive::SoftmaxWithTemperature(1.0), &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let m = tape.apply(Primitive::MeanOverAxis(1), &[x]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0]);
        let s = tape.apply(Primitive::ScalarCombine(vec![2.0]), &[m]).unwrap();
        assert_eq!(tape.value(s).item(), 2.0);
        assert!(tape.apply(Primitive::Relu, &[x, x]).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let l = tape.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).item() - (4.0f32).ln()).abs() < 1e-6);
        assert!(tape.cross_entropy(x, &[0, 1, 4]).is_err());
    }
}
