//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the
//! recorded nodes in reverse and accumulates gradients. The op set is exactly
//! what the transformer forward, the distillation loss, and the policy
//! gradient surrogate need — nothing more.

use std::rc::Rc;

use crate::tensor::{
    matmul, matmul_trans_a, matmul_trans_b, sigmoid, softplus, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    PowConst(Var, f64),
    MatMul(Var, Var),
    /// A (m x k) * B^T with B stored (n x k).
    MatMulTransB(Var, Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    /// Square score matrix; row i is softmaxed over columns 0..=i, rest zeroed.
    CausalRowSoftmax(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Exp(Var),
    /// ln(max(x, floor)); gradient is zero where the floor clips.
    LnFloored(Var, f64),
    RowSum(Var),
    RowMean(Var),
    SumAll(Var),
    /// Multiply each row of a (m x n) by the row's scalar from s (m x 1).
    MulColBroadcast(Var, Var),
    /// Multiply each row of a (m x n) elementwise by r (1 x n).
    MulRowBroadcast(Var, Var),
    /// Add r (1 x n) to each row of a (m x n).
    AddRowBroadcast(Var, Var),
    /// Select rows of a weight matrix by token id.
    EmbedRows(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// Pick scalar entries (row, col) into a (k x 1) column.
    Gather(Var, Rc<Vec<(usize, usize)>>),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    /// False for constants and frozen parameters: no gradient is ever
    /// accumulated into this node, and expensive parent-gradient products
    /// feeding only such nodes are skipped outright.
    requires: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Gradient of the last `backward` root with respect to `v`.
    /// Zero tensor if the node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.rows, n.value.cols))
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar node");
        t.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires = self.op_requires(&op);
        self.nodes.push(Node { op, value, grad: None, requires });
        Var(self.nodes.len() - 1)
    }

    fn op_requires(&self, op: &Op) -> bool {
        let req = |v: &Var| self.nodes[v.0].requires;
        match op {
            Op::Leaf => true,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulTransB(a, b)
            | Op::MulColBroadcast(a, b)
            | Op::MulRowBroadcast(a, b)
            | Op::AddRowBroadcast(a, b) => req(a) || req(b),
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::PowConst(a, _)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::CausalRowSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::LnFloored(a, _)
            | Op::RowSum(a)
            | Op::RowMean(a)
            | Op::SumAll(a)
            | Op::EmbedRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Gather(a, _) => req(a),
            Op::ConcatCols(parts) => parts.iter().any(req),
        }
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Constant leaf: data, masks, frozen parameters. Never receives a
    /// gradient.
    pub fn leaf_const(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, grad: None, requires: false });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Gradient by reference; `None` for unreached or constant nodes.
    pub fn grad_ref(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::from_vec(1, 1, vec![v]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.add_assign(&self.nodes[b.0].value);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.add_scaled(&self.nodes[b.0].value, -1.0);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert!(av.same_shape(bv), "elementwise mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.scale_in_place(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for v in &mut value.data {
            *v += c;
        }
        self.push(Op::AddConst(a), value)
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|x| x.powf(p)).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::PowConst(a, p), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_trans_b(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(Op::MatMulTransB(a, b), value)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = crate::tensor::row_softmax(&self.nodes[a.0].value);
        self.push(Op::RowSoftmax(a), value)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::RowLogSoftmax(a), value)
    }

    pub fn causal_row_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows, av.cols, "causal softmax expects square scores");
        let mut value = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let src = av.row(r);
            let dst = value.row_mut(r);
            let max = src[..=r].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..=r {
                let e = (src[c] - max).exp();
                dst[c] = e;
                sum += e;
            }
            for d in dst[..=r].iter_mut() {
                *d /= sum;
            }
        }
        self.push(Op::CausalRowSoftmax(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&x| softplus(x)).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Softplus(a), value)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Silu(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|x| x.exp()).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Exp(a), value)
    }

    pub fn ln_floored(&mut self, a: Var, floor: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|x| x.max(floor).ln()).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::LnFloored(a, floor), value)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(av.rows, 1, data);
        self.push(Op::RowSum(a), value)
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.cols as f64;
        let data = (0..av.rows).map(|r| av.row(r).iter().sum::<f64>() / n).collect();
        let value = Tensor::from_vec(av.rows, 1, data);
        self.push(Op::RowMean(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::SumAll(a), Tensor::from_vec(1, 1, vec![s]))
    }

    pub fn mul_col_broadcast(&mut self, a: Var, s: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.cols, 1);
        assert_eq!(sv.rows, av.rows);
        let mut value = av.clone();
        for r in 0..value.rows {
            let f = sv.data[r];
            for v in value.row_mut(r) {
                *v *= f;
            }
        }
        self.push(Op::MulColBroadcast(a, s), value)
    }

    pub fn mul_row_broadcast(&mut self, a: Var, r: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[r.0].value;
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, av.cols);
        let mut value = av.clone();
        for i in 0..value.rows {
            for (v, f) in value.row_mut(i).iter_mut().zip(&rv.data) {
                *v *= f;
            }
        }
        self.push(Op::MulRowBroadcast(a, r), value)
    }

    pub fn add_row_broadcast(&mut self, a: Var, r: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[r.0].value;
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, av.cols);
        let mut value = av.clone();
        for i in 0..value.rows {
            for (v, f) in value.row_mut(i).iter_mut().zip(&rv.data) {
                *v += f;
            }
        }
        self.push(Op::AddRowBroadcast(a, r), value)
    }

    pub fn embed_rows(&mut self, weight: Var, ids: Rc<Vec<usize>>) -> Var {
        let wv = &self.nodes[weight.0].value;
        let mut value = Tensor::zeros(ids.len(), wv.cols);
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(wv.row(id));
        }
        self.push(Op::EmbedRows(weight, ids), value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.cols);
        let mut value = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            value
                .row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start, len), value)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in &parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(Op::ConcatCols(parts), value)
    }

    pub fn gather(&mut self, a: Var, idx: Rc<Vec<(usize, usize)>>) -> Var {
        let av = &self.nodes[a.0].value;
        let data = idx.iter().map(|&(r, c)| av.at(r, c)).collect();
        let value = Tensor::from_vec(idx.len(), 1, data);
        self.push(Op::Gather(a, idx), value)
    }

    /// Backpropagate from a scalar root. Gradients accumulate into every
    /// node reachable from the root; read them out with [`Tape::grad`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        for n in &mut self.nodes {
            n.grad = None;
        }
        assert!(self.nodes[root.0].requires, "backward from a constant-only graph");
        self.ensure_grad(root);
        self.nodes[root.0].grad.as_mut().unwrap().data[0] = 1.0;

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].grad.is_none() {
            let (r, c) = {
                let t = &self.nodes[v.0].value;
                (t.rows, t.cols)
            };
            self.nodes[v.0].grad = Some(Tensor::zeros(r, c));
        }
    }

    fn accum(&mut self, v: Var, delta: &Tensor) {
        if !self.nodes[v.0].requires {
            return;
        }
        self.ensure_grad(v);
        self.nodes[v.0].grad.as_mut().unwrap().add_assign(delta);
    }

    fn accum_with(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires {
            return;
        }
        self.ensure_grad(v);
        f(self.nodes[v.0].grad.as_mut().unwrap());
    }

    /// Steal a node's value buffer (O(1)); pair with `put_value`. The grad
    /// is allocated first (when one will be accumulated) since its shape
    /// comes from the value.
    fn take_value(&mut self, v: Var) -> Tensor {
        if self.nodes[v.0].requires {
            self.ensure_grad(v);
        }
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(0, 0))
    }

    fn put_value(&mut self, v: Var, t: Tensor) {
        self.nodes[v.0].value = t;
    }

    fn step_backward(&mut self, i: usize, g: &Tensor) {
        // Ops are taken apart by value to satisfy the borrow checker; the
        // match below is the single source of truth for every backward rule.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                self.accum_with(*b, |t| t.add_scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                if a == b {
                    let av = self.take_value(*a);
                    self.accum_with(*a, |t| {
                        for ((tv, gv), x) in t.data.iter_mut().zip(&g.data).zip(&av.data) {
                            *tv += 2.0 * gv * x;
                        }
                    });
                    self.put_value(*a, av);
                } else {
                    let av = self.take_value(*a);
                    let bv = self.take_value(*b);
                    self.accum_with(*a, |t| {
                        for ((tv, gv), bvv) in t.data.iter_mut().zip(&g.data).zip(&bv.data) {
                            *tv += gv * bvv;
                        }
                    });
                    self.accum_with(*b, |t| {
                        for ((tv, gv), avv) in t.data.iter_mut().zip(&g.data).zip(&av.data) {
                            *tv += gv * avv;
                        }
                    });
                    self.put_value(*a, av);
                    self.put_value(*b, bv);
                }
            }
            Op::Scale(a, s) => {
                self.accum_with(*a, |t| t.add_scaled(g, *s));
            }
            Op::AddConst(a) => {
                self.accum(*a, g);
            }
            Op::PowConst(a, p) => {
                let av = self.take_value(*a);
                let p = *p;
                self.accum_with(*a, |t| {
                    for ((tv, gv), x) in t.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *tv += gv * p * x.powf(p - 1.0);
                    }
                });
                self.put_value(*a, av);
            }
            Op::MatMul(a, b) => {
                // C = A B: dA += g B^T, dB += A^T g
                debug_assert_ne!(a, b);
                if self.nodes[a.0].requires {
                    let da = matmul_trans_b(g, &self.nodes[b.0].value);
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires {
                    let db = matmul_trans_a(&self.nodes[a.0].value, g);
                    self.accum(*b, &db);
                }
            }
            Op::MatMulTransB(a, b) => {
                // C = A B^T: dA += g B, dB += g^T A
                debug_assert_ne!(a, b);
                if self.nodes[a.0].requires {
                    let da = matmul(g, &self.nodes[b.0].value);
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires {
                    let db = matmul_trans_a(g, &self.nodes[a.0].value);
                    self.accum(*b, &db);
                }
            }
            Op::RowSoftmax(a) if self.nodes[a.0].requires => {
                let p = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
                let mut da = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (d, (pv, gv)) in da.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                        *d = pv * (gv - dot);
                    }
                }
                self.accum(*a, &da);
                self.nodes[i].value = p;
            }
            Op::RowLogSoftmax(a) if self.nodes[a.0].requires => {
                // dx = g - softmax(x) * rowsum(g)
                let ls = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
                let mut da = g.clone();
                for r in 0..ls.rows {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (d, l) in da.row_mut(r).iter_mut().zip(ls.row(r)) {
                        *d -= l.exp() * gsum;
                    }
                }
                self.accum(*a, &da);
                self.nodes[i].value = ls;
            }
            Op::CausalRowSoftmax(a) if self.nodes[a.0].requires => {
                let p = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
                let mut da = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let pr = &p.row(r)[..=r];
                    let gr = &g.row(r)[..=r];
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (d, (pv, gv)) in da.row_mut(r)[..=r].iter_mut().zip(pr.iter().zip(gr)) {
                        *d = pv * (gv - dot);
                    }
                }
                self.accum(*a, &da);
                self.nodes[i].value = p;
            }
            Op::Sigmoid(a) => {
                let y = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
                self.accum_with(*a, |t| {
                    for ((tv, gv), yv) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *tv += gv * yv * (1.0 - yv);
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Softplus(a) => {
                let av = self.take_value(*a);
                self.accum_with(*a, |t| {
                    for ((tv, gv), x) in t.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *tv += gv * sigmoid(*x);
                    }
                });
                self.put_value(*a, av);
            }
            Op::Silu(a) => {
                let av = self.take_value(*a);
                self.accum_with(*a, |t| {
                    for ((tv, gv), x) in t.data.iter_mut().zip(&g.data).zip(&av.data) {
                        let s = sigmoid(*x);
                        *tv += gv * (s + x * s * (1.0 - s));
                    }
                });
                self.put_value(*a, av);
            }
            Op::Exp(a) => {
                let y = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
                self.accum_with(*a, |t| {
                    for ((tv, gv), yv) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *tv += gv * yv;
                    }
                });
                self.nodes[i].value = y;
            }
            Op::LnFloored(a, floor) => {
                let av = self.take_value(*a);
                let floor = *floor;
                self.accum_with(*a, |t| {
                    for ((tv, gv), x) in t.data.iter_mut().zip(&g.data).zip(&av.data) {
                        if *x >= floor {
                            *tv += gv / x;
                        }
                    }
                });
                self.put_value(*a, av);
            }
            Op::RowSum(a) => {
                self.accum_with(*a, |t| {
                    for r in 0..t.rows {
                        let gr = g.data[r];
                        for v in t.row_mut(r) {
                            *v += gr;
                        }
                    }
                });
            }
            Op::RowMean(a) => {
                let n = self.nodes[a.0].value.cols as f64;
                self.accum_with(*a, |t| {
                    for r in 0..t.rows {
                        let gr = g.data[r] / n;
                        for v in t.row_mut(r) {
                            *v += gr;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.data[0];
                self.accum_with(*a, |t| {
                    for v in &mut t.data {
                        *v += gv;
                    }
                });
            }
            Op::MulColBroadcast(a, s) => {
                debug_assert_ne!(a, s);
                let av = self.take_value(*a);
                let sv = self.take_value(*s);
                self.accum_with(*a, |t| {
                    for r in 0..t.rows {
                        let f = sv.data[r];
                        for (v, gv) in t.row_mut(r).iter_mut().zip(g.row(r)) {
                            *v += gv * f;
                        }
                    }
                });
                self.accum_with(*s, |t| {
                    for r in 0..t.rows {
                        let dot: f64 = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        t.data[r] += dot;
                    }
                });
                self.put_value(*a, av);
                self.put_value(*s, sv);
            }
            Op::MulRowBroadcast(a, rv) => {
                debug_assert_ne!(a, rv);
                let av = self.take_value(*a);
                let rvv = self.take_value(*rv);
                self.accum_with(*a, |t| {
                    for i2 in 0..t.rows {
                        for ((v, gv), f) in
                            t.row_mut(i2).iter_mut().zip(g.row(i2)).zip(&rvv.data)
                        {
                            *v += gv * f;
                        }
                    }
                });
                self.accum_with(*rv, |t| {
                    for i2 in 0..av.rows {
                        for ((v, gv), x) in t.data.iter_mut().zip(g.row(i2)).zip(av.row(i2)) {
                            *v += gv * x;
                        }
                    }
                });
                self.put_value(*a, av);
                self.put_value(*rv, rvv);
            }
            Op::AddRowBroadcast(a, rv) => {
                self.accum(*a, g);
                let rows = self.nodes[a.0].value.rows;
                self.accum_with(*rv, |t| {
                    for i2 in 0..rows {
                        for (v, gv) in t.data.iter_mut().zip(g.row(i2)) {
                            *v += gv;
                        }
                    }
                });
            }
            Op::EmbedRows(w, ids) => {
                let ids = ids.clone();
                self.accum_with(*w, |t| {
                    for (i2, &id) in ids.iter().enumerate() {
                        for (v, gv) in t.row_mut(id).iter_mut().zip(g.row(i2)) {
                            *v += gv;
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let (start, len) = (*start, *len);
                self.accum_with(*a, |t| {
                    for r in 0..t.rows {
                        for (v, gv) in t.row_mut(r)[start..start + len].iter_mut().zip(g.row(r)) {
                            *v += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols;
                    let rows = self.nodes[p.0].value.rows;
                    if self.nodes[p.0].requires {
                        let mut dp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accum(*p, &dp);
                    }
                    off += cols;
                }
            }
            Op::Gather(a, idx) => {
                let idx = idx.clone();
                self.accum_with(*a, |t| {
                    for (i2, &(r, c)) in idx.iter().enumerate() {
                        let cols = t.cols;
                        t.data[r * cols + c] += g.data[i2];
                    }
                });
            }
            // softmax variants whose input needs no gradient
            Op::RowSoftmax(_) | Op::RowLogSoftmax(_) | Op::CausalRowSoftmax(_) => {}
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient for a scalar
    /// function of one leaf tensor.
    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, rows: usize, cols: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(rows, cols, 0.7, &mut rng);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(&mut tape, xv);
        tape.backward(out);
        let analytic = tape.grad(xv);

        let eps = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut tp = Tape::new();
            let v = tp.leaf(xp);
            let op = build(&mut tp, v);
            let fp = tp.scalar_value(op);

            let mut xm = x.clone();
            xm.data[i] -= eps;
            let mut tm = Tape::new();
            let v = tm.leaf(xm);
            let om = build(&mut tm, v);
            let fm = tm.scalar_value(om);

            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < 1e-6,
                "grad mismatch at {i}: analytic {a}, fd {fd}"
            );
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        fd_check(
            |t, x| {
                let s = t.sigmoid(x);
                let sp = t.softplus(s);
                let si = t.silu(sp);
                let e = t.exp(si);
                let sc = t.scale(e, 0.3);
                t.sum_all(sc)
            },
            3,
            4,
            1,
        );
    }

    #[test]
    fn fd_matmul_and_norm_chain() {
        fd_check(
            |t, x| {
                let sq = t.mul(x, x);
                let ms = t.row_mean(sq);
                let mse = t.add_const(ms, 1e-5);
                let inv = t.pow_const(mse, -0.5);
                let normed = t.mul_col_broadcast(x, inv);
                let y = t.matmul_trans_b(normed, x);
                let sm = t.row_softmax(y);
                let ln = t.ln_floored(sm, 1e-12);
                t.sum_all(ln)
            },
            4,
            4,
            2,
        );
    }

    #[test]
    fn fd_causal_softmax_and_logsoftmax() {
        fd_check(
            |t, x| {
                let c = t.causal_row_softmax(x);
                let l = t.row_log_softmax(c);
                let picks = Rc::new(vec![(0usize, 0usize), (1, 1), (2, 0), (3, 2)]);
                let g = t.gather(l, picks);
                t.sum_all(g)
            },
            4,
            4,
            3,
        );
    }

    #[test]
    fn fd_broadcast_slice_concat() {
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 2, 3);
                let bb = t.slice_cols(b, 0, 2);
                let joined = t.concat_cols(vec![a, bb]);
                let colsum = t.row_sum(joined);
                let scaled = t.mul_col_broadcast(joined, colsum);
                let gains = t.leaf(Tensor::from_vec(1, 4, vec![1.5, -0.5, 0.8, 2.0]));
                let gained = t.mul_row_broadcast(scaled, gains);
                let biased = t.add_row_broadcast(gained, gains);
                t.sum_all(biased)
            },
            3,
            5,
            4,
        );
    }

    #[test]
    fn fd_embed_rows() {
        fd_check(
            |t, x| {
                let ids = Rc::new(vec![0usize, 2, 1, 2]);
                let e = t.embed_rows(x, ids);
                let sm = t.row_log_softmax(e);
                t.sum_all(sm)
            },
            3,
            4,
            5,
        );
    }

    #[test]
    fn fd_matmul_both_sides() {
        // gradient flows to both operands of a matmul
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a0 = Tensor::randn(3, 4, 0.5, &mut rng);
        let b0 = Tensor::randn(4, 2, 0.5, &mut rng);

        let eval = |a: &Tensor, b: &Tensor| -> (f64, Tensor, Tensor) {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            let c = t.matmul(av, bv);
            let s = t.silu(c);
            let out = t.sum_all(s);
            t.backward(out);
            (t.scalar_value(out), t.grad(av), t.grad(bv))
        };
        let (_, ga, gb) = eval(&a0, &b0);

        let eps = 1e-5;
        for i in 0..b0.len() {
            let mut bp = b0.clone();
            bp.data[i] += eps;
            let mut bm = b0.clone();
            bm.data[i] -= eps;
            let fd = (eval(&a0, &bp).0 - eval(&a0, &bm).0) / (2.0 * eps);
            assert!((gb.data[i] - fd).abs() < 1e-7, "dB mismatch at {i}");
        }
        for i in 0..a0.len() {
            let mut ap = a0.clone();
            ap.data[i] += eps;
            let mut am = a0.clone();
            am.data[i] -= eps;
            let fd = (eval(&ap, &b0).0 - eval(&am, &b0).0) / (2.0 * eps);
            assert!((ga.data[i] - fd).abs() < 1e-7, "dA mismatch at {i}");
        }
    }

    #[test]
    fn grad_of_unreached_node_is_zero() {
        let mut t = Tape::new();
        let a = t.scalar(2.0);
        let b = t.scalar(3.0);
        let c = t.scale(a, 2.0);
        t.backward(c);
        assert_eq!(t.grad(b).data[0], 0.0);
        assert_eq!(t.grad(a).data[0], 2.0);
    }
}
