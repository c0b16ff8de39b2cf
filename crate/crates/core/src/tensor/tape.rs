//! Dynamic reverse-mode tape.
//!
//! Each forward pass records nodes in execution order, so node ids are
//! already a topological order and `backward` simply walks them in reverse.

use super::kernels::{axpy, dot, log_sum_exp, matmul_nn, matmul_nt, matmul_tn, softmax_in_place};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block: a contiguous run of query rows attending to a
/// contiguous run of key rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` of a segment may only see keys `0..=i` of that segment.
    pub causal: bool,
    /// `true` marks a key row that no query may attend to (padding).
    pub key_mask: Option<Vec<bool>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a leaf that is never differentiated, whatever its flag says.
    pub fn frozen_leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of `a: [m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(a, "add_row")?;
        if self.node(bias).value.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(a).to_vec();
        let b = self.value(bias);
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.node(a).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), ng))
    }

    /// Adds a constant of the same shape (e.g. positional encodings).
    pub fn add_const(&mut self, a: Var, constant: &[f64]) -> Result<Var> {
        if constant.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![constant.len()],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(constant)
            .map(|(x, c)| x + c)
            .collect();
        let ng = self.node(a).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let ng = self.node(a).needs_grad;
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.node(a).needs_grad;
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.node(a).needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let (_, n) = self.to_tensor_dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng))
    }

    fn to_tensor_dims(&self, a: Var) -> (usize, usize) {
        let n = *self.shape(a).last().unwrap_or(&1);
        (self.value(a).len() / n, n)
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.to_tensor_dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; rows * d];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let o = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                o[i] = (row[i] - mean) * rs * g[i] + b[i];
            }
        }
        let ng = self.node(x).needs_grad || self.node(gain).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, rstd },
            ng,
        ))
    }

    /// Gathers rows of `table: [V×d]` and multiplies them by `scale`.
    pub fn embed(&mut self, table: Var, ids: &[usize], scale: f64) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embed")?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup of an empty sequence".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    bound: v,
                    context: "embedding id",
                });
            }
            out.extend(tv[id * d..(id + 1) * d].iter().map(|x| x * scale));
        }
        let ng = self.node(table).needs_grad;
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                scale,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q: [Nq×d]`, `k, v: [Nk×d]`; `d` is split evenly across heads.
    /// Masked keys get exactly zero weight; a query with no visible key
    /// produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let heads = layout.heads;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} columns not divisible into {heads} heads")));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != nk {
                return Err(Error::Shape {
                    op: "attention key mask",
                    lhs: vec![nk],
                    rhs: vec![mask.len()],
                });
            }
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::Index {
                    index: (s.q_start + s.q_len).max(s.k_start + s.k_len),
                    bound: nq.max(nk),
                    context: "attention segment",
                });
            }
            if layout.causal && s.q_len > s.k_len {
                return Err(Error::Contract(
                    "causal attention needs at least as many keys as queries".into(),
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = vec![0.0; nq * d];
        let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut scores = Vec::new();
        for s in &layout.segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qv[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    scores.clear();
                    let mut any = false;
                    for j in 0..s.k_len {
                        let visible = !(layout.causal && j > i)
                            && !layout
                                .key_mask
                                .as_ref()
                                .is_some_and(|m| m[s.k_start + j]);
                        if visible {
                            let krow = &kv[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            scores.push(Some(dot(qrow, krow) * scale));
                            any = true;
                        } else {
                            scores.push(None);
                        }
                    }
                    let base = probs.len();
                    probs.resize(base + s.k_len, 0.0);
                    if !any {
                        continue;
                    }
                    let max = scores
                        .iter()
                        .flatten()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (j, sc) in scores.iter().enumerate() {
                        if let Some(sc) = sc {
                            let e = (sc - max).exp();
                            probs[base + j] = e;
                            sum += e;
                        }
                    }
                    let inv = 1.0 / sum;
                    let orow = &mut out[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    for j in 0..s.k_len {
                        let p = probs[base + j] * inv;
                        probs[base + j] = p;
                        if p != 0.0 {
                            axpy(p, &vv[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh], orow);
                        }
                    }
                }
            }
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("attention"));
        }
        let ng = self.node(q).needs_grad || self.node(k).needs_grad || self.node(v).needs_grad;
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Mean token-level cross-entropy of `logits: [t×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != t || t == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits);
        if !lv.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits"));
        }
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= v {
                return Err(Error::Index {
                    index: tgt,
                    bound: v,
                    context: "cross-entropy target",
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            loss += log_sum_exp(row) - row[tgt];
            softmax_in_place(&mut probs[r * v..(r + 1) * v]);
        }
        loss /= t as f64;
        let ng = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients for every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let n = self.node(loss);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                grads[idx] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    matmul_nt(g, &nodes[b.0].value, ga, m, n, k);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * n);
                    matmul_tn(&nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    matmul_nn(g, &nodes[b.0].value, ga, m, n, k);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, n * k);
                    matmul_tn(g, &nodes[a.0].value, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        let gv = acc(grads, *v, g.len());
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    axpy(1.0, g, ga);
                }
                if wants(*bias) {
                    let n = nodes[bias.0].value.len();
                    let gb = acc(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::AddConst(a) => {
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    axpy(1.0, g, ga);
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    axpy(*f, g, ga);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let len = nodes[a.0].value.len();
                    let ga = acc(grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let n = *node.shape.last().unwrap();
                    let y = &node.value;
                    let ga = acc(grads, *a, y.len());
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inner = dot(yr, gr);
                        for i in 0..n {
                            ga[r * n + i] += yr[i] * (gr[i] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let rows = xv.len() / d;
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                let (want_x, want_g, want_b) = (wants(*x), wants(*gain), wants(*bias));
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * rstd[r];
                        dxhat[i] = gr[i] * gv[i];
                    }
                    if want_g {
                        let gg = acc(grads, *gain, d);
                        for i in 0..d {
                            gg[i] += gr[i] * xhat[i];
                        }
                    }
                    if want_b {
                        let gb = acc(grads, *bias, d);
                        axpy(1.0, gr, gb);
                    }
                    if want_x {
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, &xhat) / d as f64;
                        let gx = acc(grads, *x, xv.len());
                        for i in 0..d {
                            gx[r * d + i] += rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::Embed { table, ids, scale } => {
                if wants(*table) {
                    let d = nodes[table.0].shape[1];
                    let len = nodes[table.0].value.len();
                    let gt = acc(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(*scale, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, layout, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let t = targets.len();
                    let vsz = probs.len() / t;
                    let scale = g[0] / t as f64;
                    let gl = acc(grads, *logits, probs.len());
                    for (r, &tgt) in targets.iter().enumerate() {
                        let pr = &probs[r * vsz..(r + 1) * vsz];
                        let gr = &mut gl[r * vsz..(r + 1) * vsz];
                        axpy(scale, pr, gr);
                        gr[tgt] -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let d = nodes[q.0].shape[1];
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let (wq, wk, wv) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
        let mut gq = wq.then(|| vec![0.0; qv.len()]);
        let mut gk = wk.then(|| vec![0.0; kv.len()]);
        let mut gvv = wv.then(|| vec![0.0; vv.len()]);
        let mut ds = Vec::new();
        let mut cursor = 0;
        for s in &layout.segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let p = &probs[cursor..cursor + s.k_len];
                    cursor += s.k_len;
                    let qi = (s.q_start + i) * d + off;
                    let grow = &g[qi..qi + dh];
                    // dP and the softmax Jacobian-vector product.
                    ds.clear();
                    let mut inner = 0.0;
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            ds.push(0.0);
                            continue;
                        }
                        let kj = (s.k_start + j) * d + off;
                        let dp = dot(grow, &vv[kj..kj + dh]);
                        inner += pj * dp;
                        ds.push(dp);
                        if let Some(gv) = gvv.as_mut() {
                            axpy(pj, grow, &mut gv[kj..kj + dh]);
                        }
                    }
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let dsj = pj * (ds[j] - inner) * scale;
                        let kj = (s.k_start + j) * d + off;
                        if let Some(gq) = gq.as_mut() {
                            axpy(dsj, &kv[kj..kj + dh], &mut gq[qi..qi + dh]);
                        }
                        if let Some(gk) = gk.as_mut() {
                            axpy(dsj, &qv[qi..qi + dh], &mut gk[kj..kj + dh]);
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gvv)] {
            if let Some(local) = local {
                let len = local.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
                axpy(1.0, &local, slot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        let mut t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let m = tape.leaf(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.leaf(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        let m = tape.leaf(&Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_rows(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -5.0]]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::filled(&[2], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let x = tape.leaf(&Tensor::from_rows(&[&[1.0, 3.0], &[5.0, 5.0]]).unwrap());
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y);
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
        assert_eq!(&v[2..], &[0.0, 0.0]);

        let g0 = tape.leaf(&Tensor::zeros(&[2]));
        let b7 = tape.leaf(&Tensor::new(vec![2], vec![7.0, -2.0]).unwrap());
        let y = tape.layer_norm(x, g0, b7).unwrap();
        assert_eq!(tape.value(y), &[7.0, -2.0, 7.0, -2.0]);

        let bad = tape.leaf(&Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x, bad, b).is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(&Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.value(l)[0] - 4f64.ln()).abs() < 1e-15);

        let sure = tape.leaf(&Tensor::new(vec![1, 3], vec![0.0, 1e9, 0.0]).unwrap());
        let l = tape.cross_entropy(sure, &[1]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(uniform, &[0, 4]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf(&param(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let w = tape.leaf(&param(&[4], &data));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let grads = tape.backward(half).unwrap();
        assert_eq!(grads.get(w).unwrap(), &data);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(&param(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(&Tensor::filled(&[2, 2], 1.0));
        let w = tape.leaf(&param(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(frozen, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(w).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn attention_masks_are_exact() {
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, -0.1, 0.5, 0.5]).unwrap());
        let layout = AttentionLayout {
            heads: 1,
            segments: vec![Segment {
                q_start: 0,
                q_len: 3,
                k_start: 0,
                k_len: 3,
            }],
            causal: true,
            key_mask: None,
        };
        let out = tape.attention(q, q, q, layout).unwrap();
        // Row 0 can only see itself.
        assert_eq!(&tape.value(out)[..2], &[0.1, 0.2]);
    }
}
