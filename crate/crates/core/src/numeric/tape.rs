//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! Every operation is evaluated eagerly when it is recorded, so a [`Tape`]
//! doubles as a plain evaluator: values are available through
//! [`Tape::value`] as soon as the call returns. [`Tape::backward`] then
//! walks the record once in reverse and returns the adjoints of every node
//! that depends on a trainable leaf.
//!
//! Shapes follow a "batch of matrices" convention: the last axis is the
//! feature axis, the second-to-last is the token (row) axis, and anything
//! before that is batch.

use super::linalg::{gemm, EPS_NORM};
use super::tensor::{numel, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index_for_tests(i: usize) -> Var {
        Var(i)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, b_shared: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Mean { a: Var, axis: Option<usize> },
    Concat { a: Var, b: Var, a_shared: bool },
    Slice { a: Var, start: usize },
    LayerNorm(Var),
    L2Normalize(Var),
    Cosine { a: Var, b: Var },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    // Per-row statistics kept by normalizing ops (1/σ or the row norm).
    aux: Vec<f64>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Ordered record of operations applied during one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { numel(shape) / cols };
    (rows, cols)
}

/// (batch, rows, cols) view over the last two axes.
fn split_btc(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => (shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool, aux: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op, needs_grad, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `t` as a leaf. It receives a gradient iff `t` is trainable.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let node = Node { shape: t.shape().to_vec(), value: t.values().to_vec(), op: Op::Leaf, needs_grad: t.is_trainable(), aux: vec![] };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let node = Node { shape, value: t.into_values(), op: Op::Leaf, needs_grad: false, aux: vec![] };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that always receives a gradient, regardless of the tensor's slot.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]` (or `[.., k, m]` with `ta`), `b` is either a shared
    /// 2-D matrix or carries the same batch extent as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        contract!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices, got {:?} and {:?}", sa, sb);
        let (batch, ar, ac) = split_btc(&sa);
        let (bb, br, bc) = split_btc(&sb);
        let b_shared = sb.len() == 2 && sa.len() > 2;
        contract!(b_shared || (bb == batch && sa[..sa.len() - 2] == sb[..sb.len() - 2]), "matmul batch mismatch: {:?} x {:?}", sa, sb);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        contract!(k == k2, "matmul inner extents differ: {:?} x {:?} (ta={ta}, tb={tb})", sa, sb);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                let bs = if b_shared { &bv[..] } else { &bv[i * k * n..(i + 1) * k * n] };
                gemm(&av[i * m * k..(i + 1) * m * k], bs, &mut out[i * m * n..(i + 1) * m * n], m, k, n, ta, tb);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.ng(&[a, b]);
        self.push("matmul", shape, out, Op::MatMul { a, b, ta, tb, batch, b_shared, m, k, n }, ng, vec![])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        contract!(ok, "{what}: shape {:?} does not broadcast onto {:?}", sb, sa);
        Ok(())
    }

    /// Elementwise sum; `b` broadcasts when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "add")?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let nb = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, b]);
        self.push("add", shape, out, Op::Add { a, b }, ng, vec![])
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "mul")?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let nb = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, b]);
        self.push("mul", shape, out, Op::Mul { a, b }, ng, vec![])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant_scalar(c);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant_scalar(c);
        self.add(a, s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push("relu", shape, out, Op::Relu(a), ng, vec![])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = split_rows(&shape);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let y = &mut out[r * cols..(r + 1) * cols];
            let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - mx).exp();
                s += *yi;
            }
            y.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.ng(&[a]);
        self.push("softmax", shape, out, Op::Softmax(a), ng, vec![])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push("log", shape, out, Op::Log(a), ng, vec![])
    }

    /// Mean of all elements (scalar result).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        contract!(!av.is_empty(), "mean of an empty tensor");
        let m = av.iter().sum::<f64>() / av.len() as f64;
        let ng = self.ng(&[a]);
        self.push("mean", vec![], vec![m], Op::Mean { a, axis: None }, ng, vec![])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        contract!(axis < shape.len(), "axis {axis} out of range for {:?}", shape);
        let n = shape[axis];
        contract!(n > 0, "mean over an empty axis");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &av[(o * n + j) * inner..(o * n + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let ng = self.ng(&[a]);
        self.push("mean", oshape, out, Op::Mean { a, axis: Some(axis) }, ng, vec![])
    }

    /// Sum along the last axis, built from `mean_axis` and a scale.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        contract!(!shape.is_empty(), "sum_last of a scalar");
        let n = *shape.last().unwrap() as f64;
        let m = self.mean_axis(a, shape.len() - 1)?;
        self.scale(m, n)
    }

    /// Concatenates along the token axis; a 2-D `a` is shared across `b`'s batch.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        contract!(sa.len() >= 2 && sb.len() >= 2, "concat needs at least 2-D inputs");
        let a_shared = sa.len() == 2 && sb.len() > 2;
        let (ba, ra, ca) = split_btc(&sa);
        let (bb, rb, cb) = split_btc(&sb);
        contract!(ca == cb, "concat width mismatch: {:?} vs {:?}", sa, sb);
        contract!(a_shared || (ba == bb && sa.len() == sb.len()), "concat batch mismatch: {:?} vs {:?}", sa, sb);
        let c = ca;
        let mut out = Vec::with_capacity(bb * (ra + rb) * c);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..bb {
            if a_shared {
                out.extend_from_slice(av);
            } else {
                out.extend_from_slice(&av[i * ra * c..(i + 1) * ra * c]);
            }
            out.extend_from_slice(&bv[i * rb * c..(i + 1) * rb * c]);
        }
        let mut shape = sb.clone();
        let n = shape.len();
        shape[n - 2] = ra + rb;
        let ng = self.ng(&[a, b]);
        self.push("concat", shape, out, Op::Concat { a, b, a_shared }, ng, vec![])
    }

    /// Rows `start..start+len` along the token axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        contract!(sa.len() >= 2, "slice needs at least a 2-D input");
        let (batch, rows, cols) = split_btc(&sa);
        contract!(start + len <= rows, "slice {start}..{} exceeds {rows} rows", start + len);
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(batch * len * cols);
        for i in 0..batch {
            let base = (i * rows + start) * cols;
            out.extend_from_slice(&av[base..base + len * cols]);
        }
        let mut shape = sa.clone();
        let n = shape.len();
        shape[n - 2] = len;
        let ng = self.ng(&[a]);
        self.push("slice", shape, out, Op::Slice { a, start }, ng, vec![])
    }

    /// Zero-mean, unit-variance normalization along the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = split_rows(&shape);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let mu = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (xi - mu) * is;
            }
        }
        let ng = self.ng(&[a]);
        self.push("layer_norm", shape, out, Op::LayerNorm(a), ng, inv_std)
    }

    /// Unit-length rows along the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = split_rows(&shape);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let n = super::linalg::norm2(x);
            if n <= EPS_NORM {
                return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
            }
            norms[r] = n;
            for (o, xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = xi / n;
            }
        }
        let ng = self.ng(&[a]);
        self.push("l2_normalize", shape, out, Op::L2Normalize(a), ng, norms)
    }

    /// Row-wise cosine similarity; the last axis is reduced away.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        contract!(sa == self.nodes[b.0].shape, "cosine shape mismatch: {:?} vs {:?}", sa, self.nodes[b.0].shape);
        contract!(!sa.is_empty(), "cosine of scalars");
        let (rows, cols) = split_rows(&sa);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; rows];
        let mut aux = vec![0.0; 2 * rows];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let y = &bv[r * cols..(r + 1) * cols];
            let nx = super::linalg::norm2(x);
            let ny = super::linalg::norm2(y);
            for n in [nx, ny] {
                if n <= EPS_NORM {
                    return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
                }
            }
            out[r] = super::linalg::dot(x, y) / (nx * ny);
            aux[2 * r] = nx;
            aux[2 * r + 1] = ny;
        }
        let shape = sa[..sa.len() - 1].to_vec();
        let ng = self.ng(&[a, b]);
        self.push("cosine", shape, out, Op::Cosine { a, b }, ng, aux)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        contract!(numel(&shape) == self.nodes[a.0].value.len(), "cannot reshape {:?} to {:?}", self.nodes[a.0].shape, shape);
        let value = self.nodes[a.0].value.clone();
        let ng = self.ng(&[a]);
        self.push("reshape", shape, value, Op::Reshape(a), ng, vec![])
    }

    /// Adjoints of `loss` (a single-element node) with respect to every
    /// node that depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        contract!(self.nodes[loss.0].value.len() == 1, "backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].shape);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, batch, b_shared, m, k, n } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accumulate(grads, a, |ga| {
                    for i in 0..batch {
                        let bs = if b_shared { &bv[..] } else { &bv[i * k * n..(i + 1) * k * n] };
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(bs, dyi, gai, k, n, m, tb, true);
                        } else {
                            gemm(dyi, bs, gai, m, n, k, false, !tb);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..batch {
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let gbi = if b_shared { &mut gb[..] } else { &mut gb[i * k * n..(i + 1) * k * n] };
                        if tb {
                            gemm(dyi, ai, gbi, n, m, k, true, ta);
                        } else {
                            gemm(ai, dyi, gbi, k, m, n, !ta, false);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, |ga| add_into(ga, dy));
                self.accumulate(grads, b, |gb| {
                    let nb = gb.len();
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % nb] += d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let nb = bv.len();
                self.accumulate(grads, a, |ga| {
                    for (i, d) in dy.iter().enumerate() {
                        ga[i] += d * bv[i % nb];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % nb] += d * av[i];
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                self.accumulate(grads, a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(av) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = split_rows(&node.shape);
                self.accumulate(grads, a, |ga| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = dy[s.clone()].iter().zip(&y[s.clone()]).map(|(d, v)| d * v).sum();
                        for j in s {
                            ga[j] += y[j] * (dy[j] - dot);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                self.accumulate(grads, a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(av) {
                        *g += d / x;
                    }
                });
            }
            Op::Mean { a, axis } => {
                let sa = &self.nodes[a.0].shape;
                match axis {
                    None => {
                        let len = self.nodes[a.0].value.len();
                        let d = dy[0] / len as f64;
                        self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|g| *g += d));
                    }
                    Some(axis) => {
                        let n = sa[axis];
                        let outer: usize = sa[..axis].iter().product();
                        let inner: usize = sa[axis + 1..].iter().product();
                        let inv = 1.0 / n as f64;
                        self.accumulate(grads, a, |ga| {
                            for o in 0..outer {
                                let src = &dy[o * inner..(o + 1) * inner];
                                for j in 0..n {
                                    let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                                    for (g, d) in dst.iter_mut().zip(src) {
                                        *g += d * inv;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Concat { a, b, a_shared } => {
                let (batch, rows, c) = split_btc(&node.shape);
                let ra = split_btc(&self.nodes[a.0].shape).1;
                let rb = rows - ra;
                self.accumulate(grads, a, |ga| {
                    for i in 0..batch {
                        let src = &dy[i * rows * c..(i * rows + ra) * c];
                        if a_shared {
                            add_into(ga, src);
                        } else {
                            add_into(&mut ga[i * ra * c..(i + 1) * ra * c], src);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..batch {
                        let src = &dy[(i * rows + ra) * c..(i + 1) * rows * c];
                        add_into(&mut gb[i * rb * c..(i + 1) * rb * c], src);
                    }
                });
            }
            Op::Slice { a, start } => {
                let (batch, len, c) = split_btc(&node.shape);
                let rows = split_btc(&self.nodes[a.0].shape).1;
                self.accumulate(grads, a, |ga| {
                    for i in 0..batch {
                        let base = (i * rows + start) * c;
                        add_into(&mut ga[base..base + len * c], &dy[i * len * c..(i + 1) * len * c]);
                    }
                });
            }
            Op::LayerNorm(a) => {
                let y = &node.value;
                let (rows, cols) = split_rows(&node.shape);
                let inv_std = &node.aux;
                self.accumulate(grads, a, |ga| {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let d = &dy[s.clone()];
                        let yh = &y[s.clone()];
                        let md = d.iter().sum::<f64>() / nf;
                        let mdy = d.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for (j, g) in ga[s].iter_mut().enumerate() {
                            *g += inv_std[r] * (d[j] - md - yh[j] * mdy);
                        }
                    }
                });
            }
            Op::L2Normalize(a) => {
                let y = &node.value;
                let (rows, cols) = split_rows(&node.shape);
                let norms = &node.aux;
                self.accumulate(grads, a, |ga| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let d = &dy[s.clone()];
                        let yh = &y[s.clone()];
                        let proj: f64 = d.iter().zip(yh).map(|(a, b)| a * b).sum();
                        for (j, g) in ga[s].iter_mut().enumerate() {
                            *g += (d[j] - yh[j] * proj) / norms[r];
                        }
                    }
                });
            }
            Op::Cosine { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let cols = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                let rows = node.value.len();
                let aux = &node.aux;
                // d cos / d x = (ŷ − cos·x̂) / ‖x‖
                let partial = |x: &[f64], y: &[f64], nx: f64, ny: f64, c: f64, d: f64, g: &mut [f64]| {
                    for j in 0..x.len() {
                        g[j] += d * (y[j] / ny - c * x[j] / nx) / nx;
                    }
                };
                self.accumulate(grads, a, |ga| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        partial(&av[s.clone()], &bv[s.clone()], aux[2 * r], aux[2 * r + 1], node.value[r], dy[r], &mut ga[s]);
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        partial(&bv[s.clone()], &av[s.clone()], aux[2 * r + 1], aux[2 * r], node.value[r], dy[r], &mut gb[s]);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, a, |ga| add_into(ga, dy));
            }
        }
    }
}
