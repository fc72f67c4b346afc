//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept on
//! the tape, so [`Tape::backward`] can run the adjoints in reverse order and
//! hand parameter gradients back to the [`ParamStore`].

use crate::error::{shape, Result};
use crate::numcore::params::{ParamId, ParamStore};
use crate::numcore::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softplus(Var),
    Abs(Var),
    SmoothAbs(Var),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Conv1d { x: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// (outer, axis length, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = len + 2 * padding;
    if stride == 0 || k == 0 || span < k || (span - k) % stride != 0 {
        return Err(shape(format!(
            "conv1d: (L={len} + 2*{padding} - k={k}) / stride={stride} is not a whole number of steps"
        )));
    }
    Ok((span - k) / stride + 1)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf holding a copy of the parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// `x [.., k] * w [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.shape().is_empty() || xs.last_dim() != ws.shape()[0] {
            return Err(shape(format!("matmul: {:?} x {:?}", xs.shape(), ws.shape())));
        }
        let (m, k, n) = (xs.rows(), ws.shape()[0], ws.shape()[1]);
        let data = gemm_nn(xs.data(), ws.data(), m, k, n);
        let mut out_shape = xs.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let out = Tensor::new(out_shape, data)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::MatMul(x, w), ng))
    }

    /// Add `b` along the trailing axes of `x` (bias or positional table).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        let tail = bs.shape().len();
        if tail > xs.shape().len() || xs.shape()[xs.shape().len() - tail..] != *bs.shape() {
            return Err(shape(format!("add_bias: {:?} + {:?}", xs.shape(), bs.shape())));
        }
        let blen = bs.len().max(1);
        let mut out = xs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bs.data()[i % blen];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// Multiply `x` by `b` broadcast along the trailing axes.
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        let tail = bs.shape().len();
        if tail > xs.shape().len() || xs.shape()[xs.shape().len() - tail..] != *bs.shape() {
            return Err(shape(format!("mul_bias: {:?} * {:?}", xs.shape(), bs.shape())));
        }
        let blen = bs.len().max(1);
        let mut out = xs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= bs.data()[i % blen];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::MulBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `sqrt(x^2 + eps)`, a smooth magnitude with derivative bounded by 1.
    pub fn smooth_abs(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| (v * v + eps).sqrt(), Op::SmoothAbs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape("concat of nothing"))?);
        let rank = first.shape().len();
        if axis >= rank {
            return Err(shape(format!("concat axis {axis} on rank {rank}")));
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape(format!("concat: {:?} vs {:?}", s, first.shape())));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src);
        if axis >= v.shape().len() || start + len > v.shape()[axis] {
            return Err(shape(format!("slice {start}..{} on axis {axis} of {:?}", start + len, v.shape())));
        }
        let (outer, full, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = v.shape().to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let ng = self.ng(src);
        Ok(self.push(out, Op::Slice { src, axis, start }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim().max(1);
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis with gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xs, gs, bs) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xs.last_dim();
        if gs.shape() != [n] || bs.shape() != [n] {
            return Err(shape(format!("layer_norm: {:?} with gain {:?}", xs.shape(), gs.shape())));
        }
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, r) in row.iter_mut().enumerate() {
                *r = gs.data()[j] * (*r - mean) * inv + bs.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// Per-batch product of `[B, m, k]` and `[B, k, n]` (or `[B, n, k]`
    /// transposed when `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape(format!("batch_matmul: {sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape(format!("batch_matmul: {sa:?} x {sb:?}")));
        }
        let mut data = Vec::with_capacity(bt * m * n);
        for i in 0..bt {
            let ab = &av.data()[i * m * k..(i + 1) * m * k];
            let bb = &bv.data()[i * k * n..(i + 1) * k * n];
            let c = if transpose_b {
                gemm_nt(ab, bb, m, k, n)
            } else {
                gemm_nn(ab, bb, m, k, n)
            };
            data.extend(c);
        }
        let out = Tensor::new(vec![bt, m, n], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, ng))
    }

    /// Cross-correlation of `x [N, L, C_in]` with `kernel [k, C_in, C_out]`
    /// along the sequence axis, plus `bias [C_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] || bv.shape() != [ks[2]] {
            return Err(shape(format!(
                "conv1d: input {xs:?}, kernel {ks:?}, bias {:?}",
                bv.shape()
            )));
        }
        let (n, l, cin) = (xs[0], xs[1], xs[2]);
        let (kw, cout) = (ks[0], ks[2]);
        let lout = conv_out_len(l, kw, stride, padding)?;
        let mut out = vec![0.0; n * lout * cout];
        for s in 0..n {
            for o in 0..lout {
                let row = &mut out[(s * lout + o) * cout..(s * lout + o + 1) * cout];
                row.copy_from_slice(bv.data());
                for k in 0..kw {
                    let pos = (o * stride + k) as isize - padding as isize;
                    if pos < 0 || pos as usize >= l {
                        continue;
                    }
                    let xr = &xv.data()[(s * l + pos as usize) * cin..(s * l + pos as usize + 1) * cin];
                    for (ci, &xval) in xr.iter().enumerate() {
                        if xval == 0.0 {
                            continue;
                        }
                        let wr = &kv.data()[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                        for (r, &w) in row.iter_mut().zip(wr) {
                            *r += xval * w;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, lout, cout], out)?;
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(out, Op::Conv1d { x, kernel, bias, stride, padding }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape(format!("backward from non-scalar {:?}", self.value(root).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Run [`Tape::backward`] and add parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(root)?;
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut send = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.ng(*x) {
                    let dx = gemm_nt(g.data(), wv.data(), m, n, k);
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.ng(*w) {
                    let dw = gemm_tn(xv.data(), g.data(), m, k, n);
                    send(*w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*b) {
                    let bv = self.value(*b);
                    let blen = bv.len().max(1);
                    let mut db = vec![0.0; bv.len()];
                    for (j, &gv) in g.data().iter().enumerate() {
                        db[j % blen] += gv;
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                send(*x, g.clone());
            }
            Op::MulBias(x, b) => {
                let (xv, bv) = (self.value(*x), self.value(*b));
                let blen = bv.len().max(1);
                if self.ng(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for (j, (&gv, &xj)) in g.data().iter().zip(xv.data()).enumerate() {
                        db[j % blen] += gv * xj;
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for (j, v) in dx.data_mut().iter_mut().enumerate() {
                        *v *= bv.data()[j % blen];
                    }
                    send(*x, dx);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Affine(x, s) => send(*x, g.map(|v| v * s)),
            Op::Sigmoid(x) => send(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(x) => send(*x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Relu(x) => send(*x, g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Exp(x) => send(*x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Softplus(x) => send(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv))),
            Op::Abs(x) => send(*x, g.zip_map(self.value(*x), |gv, xv| gv * sign(xv))),
            Op::SmoothAbs(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * xv / yv)
                    .collect();
                send(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Sum(x) => send(*x, Tensor::full(self.value(*x).shape(), g.item())),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let total = y.shape()[*axis] * inner;
                for &p in parts {
                    let pv = self.value(p);
                    let block = pv.shape()[*axis] * inner;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g.data()[base..base + block]);
                        }
                        send(p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += block;
                }
            }
            Op::Slice { src, axis, start } => {
                let sv = self.value(*src);
                let (outer, full, inner) = split_axis(sv.shape(), *axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; sv.len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let srcb = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[srcb..srcb + len * inner]);
                }
                send(*src, Tensor::new(sv.shape().to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let n = y.last_dim().max(1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let n = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dgam = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for ((xr, gr), dr) in xv.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..n {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = gr[j] * gam[j];
                        dgam[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                send(*gamma, Tensor::new(vec![n], dgam)?);
                send(*beta, Tensor::new(vec![n], dbeta)?);
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..bt {
                    let ab = &av.data()[i * m * k..(i + 1) * m * k];
                    let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                    let gb = &g.data()[i * m * n..(i + 1) * m * n];
                    if *transpose_b {
                        da.extend(gemm_nn(gb, bb, m, n, k));
                        db.extend(gemm_tn(gb, ab, m, n, k));
                    } else {
                        da.extend(gemm_nt(gb, bb, m, n, k));
                        db.extend(gemm_tn(ab, gb, m, k, n));
                    }
                }
                send(*a, Tensor::new(av.shape().to_vec(), da)?);
                send(*b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Conv1d { x, kernel, bias, stride, padding } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (n, l, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (kw, cout) = (kv.shape()[0], kv.shape()[2]);
                let lout = y.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    for o in 0..lout {
                        let gr = &g.data()[(s * lout + o) * cout..(s * lout + o + 1) * cout];
                        for (d, &gv) in db.iter_mut().zip(gr) {
                            *d += gv;
                        }
                        for k in 0..kw {
                            let pos = (o * stride + k) as isize - *padding as isize;
                            if pos < 0 || pos as usize >= l {
                                continue;
                            }
                            let xo = (s * l + pos as usize) * cin;
                            for ci in 0..cin {
                                let wo = (k * cin + ci) * cout;
                                let wr = &kv.data()[wo..wo + cout];
                                dx[xo + ci] += wr.iter().zip(gr).map(|(w, gv)| w * gv).sum::<f64>();
                                let xval = xv.data()[xo + ci];
                                if xval != 0.0 {
                                    for (d, &gv) in dk[wo..wo + cout].iter_mut().zip(gr) {
                                        *d += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                send(*kernel, Tensor::new(kv.shape().to_vec(), dk)?);
                send(*bias, Tensor::new(vec![cout], db)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                send(*x, g.clone().reshape(shape)?);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences on a constant input, compared with the tape.
    fn check_input_grad(x0: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut store = ParamStore::new();
        let id = store.add("x", x0.clone());
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let out = f(&mut tape, x);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xs = x0.clone();
                xs.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.constant(xs);
                let o = f(&mut t, v);
                t.value(o).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - num).abs() <= 1e-6 * (1.0 + a.abs()), "elem {i}: {a} vs {num}");
        }
    }

    fn weights(t: &mut Tape, shape: &[usize], seed: f64) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        t.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn sample(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.7 + 0.3).cos()).collect()).unwrap()
    }

    #[test]
    fn grad_matmul_bias_sigmoid_tanh() {
        check_input_grad(sample(&[3, 4]), |t, x| {
            let w = weights(t, &[4, 2], 0.9);
            let b = weights(t, &[2], 0.4);
            let y = t.matmul(x, w).unwrap();
            let y = t.add_bias(y, b).unwrap();
            let s = t.sigmoid(y);
            let h = t.tanh(s);
            let e = t.exp(h);
            t.sum(e)
        });
    }

    #[test]
    fn grad_elementwise_family() {
        check_input_grad(sample(&[2, 5]), |t, x| {
            let c = weights(t, &[2, 5], 1.3);
            let a = t.mul(x, c).unwrap();
            let b = t.sub(a, x).unwrap();
            let s = t.smooth_abs(b, 1e-3);
            let p = t.softplus(s);
            let q = t.add(p, x).unwrap();
            let r = t.one_minus(q);
            let u = t.abs(r);
            t.sum(u)
        });
    }

    #[test]
    fn grad_concat_slice_reshape() {
        check_input_grad(sample(&[2, 3, 4]), |t, x| {
            let c = weights(t, &[2, 2, 4], 0.5);
            let cat = t.concat(&[x, c, x], 1).unwrap();
            let sl = t.slice(cat, 2, 1, 2).unwrap();
            let r = t.reshape(sl, vec![2, 16]).unwrap();
            let w = weights(t, &[16, 1], 0.2);
            let y = t.matmul(r, w).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
    }

    #[test]
    fn grad_softmax_layernorm() {
        check_input_grad(sample(&[3, 4]), |t, x| {
            let sm = t.softmax(x);
            let w = weights(t, &[3, 4], 0.77);
            let p = t.mul(sm, w).unwrap();
            let g = weights(t, &[4], 0.3);
            let b = weights(t, &[4], 0.6);
            let ln = t.layer_norm(p, g, b, 1e-5).unwrap();
            let ln = t.mul(ln, w).unwrap();
            t.sum(ln)
        });
    }

    #[test]
    fn grad_batch_matmul_both_layouts() {
        check_input_grad(sample(&[2, 3, 4]), |t, x| {
            let k = weights(t, &[2, 5, 4], 0.8);
            let s = t.batch_matmul(x, k, true).unwrap();
            let s = t.batch_matmul(s, k, false).unwrap();
            let xx = t.batch_matmul(x, x, true).unwrap();
            let a = t.sum(s);
            let b = t.tanh(xx);
            let b = t.sum(b);
            t.add(a, b).unwrap()
        });
    }

    #[test]
    fn grad_mul_bias_both_operands() {
        check_input_grad(sample(&[2, 3, 4]), |t, x| {
            let b = weights(t, &[4], 0.9);
            let y = t.mul_bias(x, b).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
        check_input_grad(sample(&[3, 4]), |t, b| {
            let x = weights(t, &[2, 3, 4], 0.35);
            let y = t.mul_bias(x, b).unwrap();
            let y = t.sigmoid(y);
            t.sum(y)
        });
    }

    #[test]
    fn grad_conv1d() {
        for (stride, padding, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (1, 0, 5)] {
            check_input_grad(sample(&[2, 5, 3]), |t, x| {
                let kern = weights(t, &[k, 3, 2], 0.45);
                let b = weights(t, &[2], 0.1);
                let y = t.conv1d(x, kern, b, stride, padding).unwrap();
                let y = t.tanh(y);
                t.sum(y)
            });
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 4]));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_err());
        let bias = t.constant(Tensor::zeros(&[4]));
        assert!(t.add_bias(a, bias).is_err());
        let x = t.constant(Tensor::zeros(&[1, 5, 2]));
        let k = t.constant(Tensor::zeros(&[2, 2, 1]));
        let kb = t.constant(Tensor::zeros(&[1]));
        assert!(t.conv1d(x, k, kb, 2, 0).is_err());
        assert!(t.slice(a, 1, 2, 2).is_err());
        let s = t.sum(a);
        let _ = s;
        assert!(t.backward(a).is_err());
    }
}
