//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! output value and enough saved state to apply its backward rule. Nodes are
//! appended in evaluation order, so walking the list backwards is a reverse
//! topological traversal.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, broadcast_map, broadcast_shape, gemm, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask with its own shape; broadcast against the masked tensor.
/// `true` means the entry takes part.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("mask expects {n} entries, got {}", data.len()),
            });
        }
        Ok(Mask { shape, data })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Sub { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Mul { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Div { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    MulConst { x: Var, c: Arc<Vec<f64>>, map: Option<Vec<usize>> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool, batch: usize },
    Gather { x: Var, map: Vec<usize> },
    Reshape { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    Relu { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Dropout { x: Var, scale: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { x: Var },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// Seed that generated this node's randomness, if any.
    seed: Option<u64>,
}

/// The computation tape. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Records a tensor that gradients should flow into.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push(value.into(), Op::Leaf, true)
    }

    /// Records a tensor treated as a constant.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Seed recorded by a stochastic op.
    pub fn seed(&self, v: Var) -> Option<u64> {
        self.nodes[v.0].seed
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            seed: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_value(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Var {
        let t = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(Arc::new(t), op, rg)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let map_a = (sa != out).then(|| broadcast_map(&sa, &out));
        let map_b = (sb != out).then(|| broadcast_map(&sb, &out));
        let da = self.data(a);
        let db = self.data(b);
        let n: usize = out.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = da[map_a.as_ref().map_or(i, |m| m[i])];
                let y = db[map_b.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        Ok((out, data, map_a, map_b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, map_a, map_b) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_value(shape, data, Op::Add { a, b, map_a, map_b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, map_a, map_b) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_value(shape, data, Op::Sub { a, b, map_a, map_b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, map_a, map_b) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_value(shape, data, Op::Mul { a, b, map_a, map_b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, map_a, map_b) = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_value(shape, data, Op::Div { a, b, map_a, map_b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_value(shape, data, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_value(shape, data, Op::AddScalar { x }, rg)
    }

    /// Elementwise product with a constant tensor broadcast onto `x`.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shape(c.shape(), &sx) {
            Some(s) if s == sx => {}
            _ => return Err(Error::shape("mul_const", &sx, c.shape())),
        }
        let map = (c.shape() != sx.as_slice()).then(|| broadcast_map(c.shape(), &sx));
        let cd = c.data();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * cd[map.as_ref().map_or(i, |m| m[i])])
            .collect();
        let rg = self.rg(x);
        Ok(self.push_value(
            sx,
            data,
            Op::MulConst { x, c: Arc::new(cd.to_vec()), map },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_value(shape, data, Op::Relu { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_value(shape, data, Op::Exp { x }, rg)
    }

    /// Natural log; defined for strictly positive inputs.
    pub fn ln(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_value(shape, data, Op::Ln { x }, rg)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Returns `x`
    /// unchanged when not training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let v = self.push_value(shape, data, Op::Dropout { x, scale }, rg);
        self.nodes[v.0].seed = Some(seed);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        let op = Op::MatMul { a, b, m, k, n, trans_b: false, batch: 1 };
        Ok(self.push_value(vec![m, n], out, op, rg))
    }

    /// Batched product over all leading dimensions.
    ///
    /// `a: [.., m, k]`, `b: [.., k, n]` (or `[.., n, k]` when `trans_b`);
    /// leading dimensions must match exactly.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let da = self.data(a);
        let db = self.data(b);
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let op = Op::MatMul { a, b, m, k, n, trans_b, batch };
        Ok(self.push_value(shape, out, op, rg))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Arc::new(t), Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let in_strides = strides(&s);
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = self.value(x).numel();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; s.len()];
        let mut pos = 0usize;
        for _ in 0..total {
            map.push(pos);
            for d in (0..s.len()).rev() {
                idx[d] += 1;
                pos += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                pos -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        Ok(self.gather_map(x, out_shape, map))
    }

    /// Transpose of the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Selects `indices` along the first axis.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("select_rows", &s, indices));
        }
        let row: usize = s[1..].iter().product();
        let map = indices
            .iter()
            .flat_map(|&i| i * row..(i + 1) * row)
            .collect();
        let mut shape = s.clone();
        shape[0] = indices.len();
        Ok(self.gather_map(x, shape, map))
    }

    fn gather_map(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        self.push_value(shape, data, Op::Gather { x, map }, rg)
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along `axis`, max-stabilized. Masked entries (mask `false`) are
    /// exactly zero; a row with no unmasked entry is all zeros.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let allowed = expand_mask(mask, &shape, "softmax")?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let ok = |j: usize| allowed.as_ref().map_or(true, |m| m[at(j)]);
                let mut max = f64::NEG_INFINITY;
                for j in (0..len).filter(|&j| ok(j)) {
                    max = max.max(src[at(j)]);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for j in (0..len).filter(|&j| ok(j)) {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in (0..len).filter(|&j| ok(j)) {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push_value(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let log_sum = (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = (src[at(j)] - max) - log_sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push_value(shape, out, Op::LogSoftmax { x, outer, len, inner }, rg))
    }

    /// Layer normalization over the last axis with gain and bias of that size.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = shape.iter().product::<usize>() / d;
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_value(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ---- lookups and reductions ----------------------------------------

    /// Rows of `table: [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", &s, &[]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", s[0])));
        }
        let dim = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        let op = Op::Embedding { table, ids: ids.to_vec(), dim };
        Ok(self.push_value(vec![ids.len(), dim], out, op, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push_value(vec![], vec![s], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[o * len * inner + j * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push_value(out_shape, out, Op::SumAxis { x, outer, len, inner }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. `loss` must hold a single element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, map_a, map_b } => {
                self.acc_mapped(*a, map_a, grads, |i| g[i]);
                self.acc_mapped(*b, map_b, grads, |i| g[i]);
            }
            Op::Sub { a, b, map_a, map_b } => {
                self.acc_mapped(*a, map_a, grads, |i| g[i]);
                self.acc_mapped(*b, map_b, grads, |i| -g[i]);
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                self.acc_mapped(*a, map_a, grads, |i| g[i] * db[ib(i)]);
                self.acc_mapped(*b, map_b, grads, |i| g[i] * da[ia(i)]);
            }
            Op::Div { a, b, map_a, map_b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                self.acc_mapped(*a, map_a, grads, |i| g[i] / db[ib(i)]);
                self.acc_mapped(*b, map_b, grads, |i| {
                    let d = db[ib(i)];
                    -g[i] * da[ia(i)] / (d * d)
                });
            }
            Op::Scale { x, c } => self.acc(*x, grads, |i| g[i] * c),
            Op::AddScalar { x } => self.acc(*x, grads, |i| g[i]),
            Op::MulConst { x, c, map } => {
                self.acc(*x, grads, |i| g[i] * c[map.as_ref().map_or(i, |m| m[i])])
            }
            Op::MatMul { a, b, m, k, n, trans_b, batch } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, da.len());
                    for i in 0..*batch {
                        // dA = dC op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, db.len());
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let out = &mut buf[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored [n, k]: dB = dC^T A
                            gemm(n, m, k, gi, true, ai, false, out, 1.0);
                        } else {
                            // dB = A^T dC
                            gemm(k, m, n, ai, true, gi, false, out, 1.0);
                        }
                    }
                }
            }
            Op::Gather { x, map } => {
                if self.rg(*x) {
                    let buf = grad_buf(grads, *x, self.value(*x).numel());
                    for (i, &src) in map.iter().enumerate() {
                        buf[src] += g[i];
                    }
                }
            }
            Op::Reshape { x } => self.acc(*x, grads, |i| g[i]),
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if self.rg(*x) {
                    let buf = grad_buf(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if self.rg(*x) {
                    let buf = grad_buf(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                self.acc(*x, grads, |i| if xd[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Exp { x } => self.acc(*x, grads, |i| g[i] * y[i]),
            Op::Ln { x } => {
                let xd = self.data(*x);
                self.acc(*x, grads, |i| g[i] / xd[i])
            }
            Op::Dropout { x, scale } => self.acc(*x, grads, |i| g[i] * scale[i]),
            Op::Embedding { table, ids, dim } => {
                if self.rg(*table) {
                    let buf = grad_buf(grads, *table, self.value(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id * dim..(id + 1) * dim];
                        for (d, s) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let rows = rstd.len();
                let gd = self.data(*gamma);
                if self.rg(*gamma) {
                    let buf = grad_buf(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let buf = grad_buf(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let buf = grad_buf(grads, *x, rows * d);
                    for r in 0..rows {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = g[r * d + j] * gd[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[r * d + j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let gh = g[r * d + j] * gd[j];
                            buf[r * d + j] += rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                }
            }
            Op::Sum { x } => self.acc(*x, grads, |_| g[0]),
            Op::SumAxis { x, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                self.acc(*x, grads, |i| {
                    let o = i / (len * inner);
                    let r = i % inner;
                    g[o * inner + r]
                });
                let _ = outer;
            }
        }
    }

    fn acc(&self, x: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.rg(x) {
            return;
        }
        let n = self.value(x).numel();
        let buf = grad_buf(grads, x, n);
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i);
        }
    }

    /// Accumulates `f(i)` for every output position `i` into the input
    /// position it was broadcast from.
    fn acc_mapped(
        &self,
        x: Var,
        map: &Option<Vec<usize>>,
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(usize) -> f64,
    ) {
        match map {
            None => self.acc(x, grads, f),
            Some(map) => {
                if !self.rg(x) {
                    return;
                }
                let buf = grad_buf(grads, x, self.value(x).numel());
                for (i, &src) in map.iter().enumerate() {
                    buf[src] += f(i);
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn expand_mask(mask: Option<&Mask>, shape: &[usize], op: &'static str) -> Result<Option<Vec<bool>>> {
    let Some(mask) = mask else { return Ok(None) };
    match broadcast_shape(&mask.shape, shape) {
        Some(s) if s == shape => {}
        _ => return Err(Error::shape(op, shape, &mask.shape)),
    }
    if mask.shape == shape {
        return Ok(Some(mask.data.clone()));
    }
    let map = broadcast_map(&mask.shape, shape);
    Ok(Some(map.into_iter().map(|i| mask.data[i]).collect()))
}
