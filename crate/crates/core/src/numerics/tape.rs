//! Reverse-mode tape.
//!
//! Each operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, gemm_view, Tensor, View};
use super::{ParamStore, ShapeError};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, idx: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var, t: Vec<f64> },
    Relu(Var),
    Tanh(Var),
    MaskedFill { x: Var, mask: Box<[bool]> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    WeightedSquaredError { pred: Var, target: Vec<f64>, weight: Vec<f64> },
    Attention(Box<AttentionNode>),
}

#[derive(Debug)]
struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    batch: usize,
    tokens: usize,
    heads: usize,
    scale: f64,
    /// Attention weights, `[batch, heads, tokens, tokens]`.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Expression graph recorded while evaluating a model.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> ShapeError {
    ShapeError { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec())
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, false)
    }

    /// Input that gradients are collected for.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, true)
    }

    /// Parameter `id` of `store`, tracked so [`Gradients::params`] can collect it.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        let t = store.tensor(id);
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param(id), true)
    }

    /// `a (m x k) @ b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Batched matmul over matching leading dimensions:
    /// `[.., m, k] @ [.., k, n]`, or `[.., m, k] @ [.., n, k]^T` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("batch_matmul", &[sa, sb]));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(shape_err("batch_matmul", &[sa, sb]));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for t in 0..batch {
            let at = &av[t * m * k..(t + 1) * m * k];
            let bt = &bv[t * k * n..(t + 1) * k * n];
            let ct = &mut out[t * m * n..(t + 1) * m * n];
            if transpose_b {
                gemm_nt(at, bt, ct, m, k, n);
            } else {
                gemm_nn(at, bt, ct, m, k, n);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::BatchMatMul { a, b, transpose_b, batch, m, k, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// Adds a `[n]` row vector to every row of `[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, ShapeError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sa.last() != Some(&sr[0]) {
            return Err(shape_err("add_row", &[sa, sr]));
        }
        let n = sr[0];
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for r in out.chunks_exact_mut(n.max(1)) {
            add_into(r, rv);
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(sa.to_vec(), out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    /// Row lookup: `table [r, w]` gathered at `idx` gives `[idx.len(), w]`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var, ShapeError> {
        let st = self.shape(table);
        if st.len() != 2 || idx.iter().any(|&i| i >= st[0]) {
            return Err(shape_err("gather", &[st, &[idx.len()]]));
        }
        let w = st[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let ng = self.needs(table);
        Ok(self.push(vec![idx.len(), w], out, Op::Gather { table, idx }, ng))
    }

    /// Softmax over the last axis. `-inf` entries get zero weight; a row of
    /// only `-inf` yields zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - mx);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, ShapeError> {
        let sx = self.shape(x);
        let n = *sx.last().unwrap_or(&0);
        if self.shape(gain) != [n] || self.shape(bias) != [n] || n == 0 {
            return Err(shape_err("layer_norm", &[sx, self.shape(gain), self.shape(bias)]));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(sx.to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t: Vec<f64> = self.value(a).iter().map(|&x| fast_tanh(GELU_C * (x + 0.044715 * x * x * x))).collect();
        let out = self.value(a).iter().zip(&t).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a, t }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| math::tanh(x)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), ng)
    }

    /// Replaces entries where `mask` is true with `value`; those entries pass
    /// no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Box<[bool]>, value: f64) -> Result<Var, ShapeError> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("masked_fill", &[self.shape(x), &[mask.len()]]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskedFill { x, mask }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", &[self.shape(x), shape]));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), ng))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, ShapeError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &[&sx, perm]));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = permute_values(self.value(x), &sx, perm);
        let ng = self.needs(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    /// Multi-head scaled dot-product attention over packed token rows.
    ///
    /// `q`, `k` and `v` are `[batch * tokens, width]` with heads laid side by
    /// side along the width. `bias`, if given, is `[batch, heads, tokens,
    /// tokens]` and is added to the logits. `valid` marks real tokens: padded
    /// keys receive no weight and padded query rows output zero.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        valid: Box<[bool]>,
        batch: usize,
        heads: usize,
    ) -> Result<Var, ShapeError> {
        let sq = self.shape(q).to_vec();
        let bad = sq.len() != 2
            || self.shape(k) != sq.as_slice()
            || self.shape(v) != sq.as_slice()
            || heads == 0
            || batch == 0
            || !sq[0].is_multiple_of(batch)
            || !sq[1].is_multiple_of(heads)
            || valid.len() != sq[0];
        if bad {
            return Err(shape_err("attention", &[&sq, self.shape(k), self.shape(v), &[batch, heads, valid.len()]]));
        }
        let (rows, width) = (sq[0], sq[1]);
        let (nt, dk) = (rows / batch, width / heads);
        if let Some(b) = bias {
            if self.shape(b) != [batch, heads, nt, nt] {
                return Err(shape_err("attention", &[&sq, self.shape(b)]));
            }
        }
        let scale = 1.0 / math::sqrt(dk as f64);
        let mut probs = vec![0.0; batch * heads * nt * nt];
        let mut out = vec![0.0; rows * width];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let bv = bias.map(|b| self.value(b));
        for b in 0..batch {
            for h in 0..heads {
                let at = (b * nt) * width + h * dk;
                let blk = (b * heads + h) * nt * nt;
                let p = &mut probs[blk..blk + nt * nt];
                gemm_view(
                    nt,
                    dk,
                    nt,
                    scale,
                    View { data: qv, offset: at, strides: (width, 1) },
                    View { data: kv, offset: at, strides: (1, width) },
                    p,
                    0,
                    (nt, 1),
                );
                if let Some(bv) = bv {
                    add_into(p, &bv[blk..blk + nt * nt]);
                }
                for i in 0..nt {
                    let row = &mut p[i * nt..(i + 1) * nt];
                    if !valid[b * nt + i] {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut mx = f64::NEG_INFINITY;
                    for (j, x) in row.iter().enumerate() {
                        if valid[b * nt + j] {
                            mx = mx.max(*x);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if valid[b * nt + j] { math::exp(*x - mx) } else { 0.0 };
                        sum += *x;
                    }
                    if sum > 0.0 && sum.is_finite() {
                        row.iter_mut().for_each(|x| *x /= sum);
                    }
                }
                gemm_view(
                    nt,
                    nt,
                    dk,
                    1.0,
                    View { data: p, offset: 0, strides: (nt, 1) },
                    View { data: vv, offset: at, strides: (width, 1) },
                    &mut out,
                    at,
                    (width, 1),
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v) || bias.is_some_and(|b| self.needs(b));
        let node = AttentionNode { q, k, v, bias, batch, tokens: nt, heads, scale, probs };
        Ok(self.push(sq, out, Op::Attention(Box::new(node)), ng))
    }

    /// `sum_i weight_i * (pred_i - target_i)^2` as a `[1]` tensor.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    ) -> Result<Var, ShapeError> {
        let n = self.value(pred).len();
        if target.len() != n || weight.len() != n {
            return Err(shape_err("weighted_squared_error", &[self.shape(pred), &[target.len()], &[weight.len()]]));
        }
        let s = self
            .value(pred)
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        let ng = self.needs(pred);
        Ok(self.push(vec![1], vec![s], Op::WeightedSquaredError { pred, target, weight }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match node.op {
                // leaves keep their gradient for the caller
                Op::Leaf | Op::Param(_) => grads[id] = Some(g),
                // pass-through gradients move instead of being copied
                Op::Reshape(x) => self.accumulate_owned(&mut grads, x, g),
                Op::Add(a, b) => {
                    self.accumulate_copy(&mut grads, b, &g);
                    self.accumulate_owned(&mut grads, a, g);
                }
                _ => self.propagate(node, &g, &mut grads),
            }
        }
        Gradients { grads }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => add_into(slot, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_copy(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => add_into(slot, g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| gemm_nt(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av, g, gb, k, m, n));
            }
            &Op::BatchMatMul { a, b, transpose_b, batch, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate(grads, a, |ga| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bv[t * k * n..(t + 1) * k * n];
                        let gat = &mut ga[t * m * k..(t + 1) * m * k];
                        if transpose_b {
                            gemm_nn(gt, bt, gat, m, n, k);
                        } else {
                            gemm_nt(gt, bt, gat, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                        if transpose_b {
                            // d(B^T) = A^T G, so dB = G^T A : (n x m)(m x k)
                            gemm_tn(gt, at, gbt, n, m, k);
                        } else {
                            gemm_tn(at, gt, gbt, k, m, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate_copy(grads, *a, g);
                self.accumulate_copy(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                self.accumulate_copy(grads, *a, g);
                let n = self.shape(*row)[0];
                self.accumulate(grads, *row, |gr| {
                    for r in g.chunks_exact(n.max(1)) {
                        add_into(gr, r);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * s;
                    }
                });
            }
            Op::Gather { table, idx } => {
                let w = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    if w == 1 {
                        for (&i, gv) in idx.iter().zip(g) {
                            gt[i] += gv;
                        }
                        return;
                    }
                    for (&i, gr) in idx.iter().zip(g.chunks_exact(w)) {
                        add_into(&mut gt[i * w..(i + 1) * w], gr);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for r in 0..y.len() / n {
                        let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            ga[r * n + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.shape(*gain)[0];
                let gv = self.value(*gain);
                let rows = xhat.len() / n;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            gx[r * n + c] += inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * xr[c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in g.chunks_exact(n) {
                        add_into(gb, r);
                    }
                });
            }
            Op::Gelu { a, t } => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i], t[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        if !mask[i] {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate_copy(grads, *x, g),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_values(g, &node.shape, &inverse);
                self.accumulate_copy(grads, *x, &back);
            }
            Op::Attention(n) => self.attention_backward(n, g, grads),
            Op::WeightedSquaredError { pred, target, weight } => {
                let pv = self.value(*pred);
                self.accumulate(grads, *pred, |gp| {
                    for i in 0..pv.len() {
                        gp[i] += g[0] * 2.0 * weight[i] * (pv[i] - target[i]);
                    }
                });
            }
        }
    }
}

impl Tape {
    fn attention_backward(&self, n: &AttentionNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionNode { q, k, v, bias, batch, tokens: nt, heads, scale, .. } = *n;
        let width = self.shape(q)[1];
        let dk = width / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut gs = vec![0.0; n.probs.len()];
        let mut dp = vec![0.0; nt * nt];
        for b in 0..batch {
            for h in 0..heads {
                let at = (b * nt) * width + h * dk;
                let blk = (b * heads + h) * nt * nt;
                let p = &n.probs[blk..blk + nt * nt];
                let gview = View { data: g, offset: at, strides: (width, 1) };
                // dV = P^T dO
                gemm_view(nt, nt, dk, 1.0, View { data: p, offset: 0, strides: (1, nt) }, gview, &mut gv, at, (width, 1));
                // dP = dO V^T
                dp.iter_mut().for_each(|x| *x = 0.0);
                gemm_view(nt, dk, nt, 1.0, gview, View { data: vv, offset: at, strides: (1, width) }, &mut dp, 0, (nt, 1));
                let ds = &mut gs[blk..blk + nt * nt];
                for i in 0..nt {
                    let (pr, dr) = (&p[i * nt..(i + 1) * nt], &dp[i * nt..(i + 1) * nt]);
                    let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..nt {
                        ds[i * nt + j] = pr[j] * (dr[j] - dot);
                    }
                }
                let dsv = View { data: ds, offset: 0, strides: (nt, 1) };
                gemm_view(nt, nt, dk, scale, dsv, View { data: kv, offset: at, strides: (width, 1) }, &mut gq, at, (width, 1));
                let dst = View { data: ds, offset: 0, strides: (1, nt) };
                gemm_view(nt, nt, dk, scale, dst, View { data: qv, offset: at, strides: (width, 1) }, &mut gk, at, (width, 1));
            }
        }
        self.accumulate_copy(grads, q, &gq);
        self.accumulate_copy(grads, k, &gk);
        self.accumulate_copy(grads, v, &gv);
        if let Some(b) = bias {
            self.accumulate_copy(grads, b, &gs);
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the leaf or parameter node `v`, if any flowed into it.
    /// Intermediate gradients are released during the sweep.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients summed over every use on `tape`; unused
    /// parameters get zeros.
    pub fn params(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.tensor(i).len()]).collect();
        for (id, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = &self.grads[id] {
                    add_into(&mut out[p], g);
                }
            }
        }
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

// tanh through a single exp; agrees with the library tanh to a few ulp
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = math::exp(2.0 * u);
    (e - 1.0) / (e + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn permute_values(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // with the last axis fixed, whole rows move at once
    let (outer, block) = match perm.last() {
        Some(&p) if p == rank - 1 => (rank - 1, shape[rank - 1]),
        _ => (rank, 1),
    };
    let out_shape: Vec<usize> = perm[..outer].iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm[..outer].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if block == 0 {
        return out;
    }
    let mut counter = vec![0usize; outer];
    let mut offset = 0usize;
    for _ in 0..src.len() / block {
        out.extend_from_slice(&src[offset..offset + block]);
        // increment the output multi-index, tracking the input offset
        let mut ax = outer;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}
