//! Reverse-mode automatic differentiation on a linear operation tape.
//!
//! Forward calls push nodes in topological order; [`Tape::backward`] walks
//! them in reverse and accumulates gradients into per-node buffers. Values
//! are immutable once pushed. Parameters are bound by reference-counted
//! handle, so putting the same weights on many tapes copies nothing.
//!
//! Two extras beyond a plain Wengert list:
//!
//! * [`Tape::mark`] / [`Tape::rollback`] truncate the tape back to a saved
//!   point so one recorded prefix can be re-used under many alternative
//!   suffixes (the attribution sweep re-clamps one activation row per
//!   Riemann step and only re-runs the layers above it).
//! * Override ops ([`Tape::override_rows`], [`Tape::override_entries`])
//!   replace slots of a computed matrix with independent leaves. Gradient
//!   at an overridden slot flows to the replacement leaf and not upstream,
//!   which is exactly the clamp semantics neuron interventions need.
//!
//! Calling `backward` twice without pushing new nodes or rolling back is an
//! error; gradients do not silently accumulate across passes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    dot, gelu, gelu_deriv, log_sum_exp, mm, mm_at, mm_bt, softmax_row, Tensor,
};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(a) => a,
        }
    }
}

enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    Matmul { a: Var, b: Var },
    /// a[m,k] @ b[n,k]^T
    MatmulBt { a: Var, b: Var },
    AddMat { a: Var, b: Var },
    /// matrix + row vector broadcast over rows
    AddRow { m: Var, v: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    SoftmaxRows { x: Var },
    /// Fused multi-head self-attention over projected q,k,v ([n,d] each).
    /// Row-softmax probabilities are saved per head for the backward pass.
    Mhsa { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<f64> },
    Gather { src: Var, ids: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    MeanRows { x: Var },
    SumAll { x: Var },
    OverrideRows { src: Var, rows: Vec<(usize, Var)> },
    OverrideEntries { src: Var, entries: Vec<(usize, usize, Var)> },
    /// sum over rows of -log softmax(row)[target]
    CrossEntropySum { logits: Var, targets: Vec<usize> },
    /// scores [k,1], positive first: -log( exp(s0) / sum_i exp(si) )
    InfoNce { scores: Var },
    /// softmax(scores)[target] for scores [v,1]
    TargetProb { scores: Var, target: usize },
    /// weighted sum of scalars
    WeightedSum { parts: Vec<(Var, f64)> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    val: Storage,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    nodes: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_ran: bool,
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

    /// Saves the current tape length for a later [`Tape::rollback`].
    pub fn mark(&self) -> TapeMark {
        TapeMark { nodes: self.nodes.len() }
    }

    /// Drops every node pushed after `mark` and re-arms backward.
    pub fn rollback(&mut self, mark: TapeMark) {
        assert!(mark.nodes <= self.nodes.len(), "rollback past live nodes");
        self.nodes.truncate(mark.nodes);
        self.grads.clear();
        self.backward_ran = false;
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, val: Storage, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, rows, cols, val, needs_grad });
        self.backward_ran = false;
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.node(v).val.as_slice()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_raw(n.rows, n.cols, n.val.as_slice().to_vec())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v)[0]
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Differentiable leaf (parameter); shares the tensor's storage.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf_impl(t, true)
    }

    /// Non-differentiable leaf; shares the tensor's storage.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_impl(t, false)
    }

    fn leaf_impl(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        let (rows, cols) = t.shape();
        // Tensor keeps its data behind an Arc; clone the handle, not the data.
        self.push(Op::Leaf, rows, cols, Storage::Shared(t.storage()), needs_grad)
    }

    /// Differentiable leaf from raw values (clamp values, probes).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.push(Op::Leaf, rows, cols, Storage::Owned(data), true)
    }

    pub fn constant_vec(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.push(Op::Leaf, rows, cols, Storage::Owned(data), false)
    }

    // ── Primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let val = mm(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, m, n, Storage::Owned(val), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let val = mm_bt(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatmulBt { a, b }, m, n, Storage::Owned(val), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "add shape mismatch");
        let val: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::AddMat { a, b }, r, c, Storage::Owned(val), ng)
    }

    pub fn add_row(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = self.shape(m);
        assert_eq!(self.shape(v), (1, c), "add_row vector shape");
        let vv = self.value(v).to_vec();
        let mut val = self.value(m).to_vec();
        for row in val.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&vv) {
                *x += y;
            }
        }
        let ng = self.needs(m) || self.needs(v);
        self.push(Op::AddRow { m, v }, r, c, Storage::Owned(val), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "mul shape mismatch");
        let val: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, r, c, Storage::Owned(val), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cc) = self.shape(a);
        let val: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, r, cc, Storage::Owned(val), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let val: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(a);
        self.push(Op::Gelu { a }, r, c, Storage::Owned(val), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, c), "layer_norm beta shape");
        let val = crate::numerics::tensor::layer_norm_rows(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            r,
            c,
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, eps }, r, c, Storage::Owned(val), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut val = self.value(x).to_vec();
        for row in val.chunks_mut(c) {
            softmax_row(row);
        }
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows { x }, r, c, Storage::Owned(val), ng)
    }

    /// Multi-head self-attention over already-projected q, k, v ([n, d]).
    /// Returns the concatenated per-head context, [n, d].
    pub fn mhsa(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!((n, d), self.shape(k), "mhsa k shape");
        assert_eq!((n, d), self.shape(v), "mhsa v shape");
        assert_eq!(d % n_heads, 0, "head count must divide width");
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).to_vec();
        let kv = self.value(k).to_vec();
        let vv = self.value(v).to_vec();
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; n_heads * n * n];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; n * dh];
        let mut vh = vec![0.0; n * dh];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..n {
                qh[i * dh..(i + 1) * dh].copy_from_slice(&qv[i * d + off..i * d + off + dh]);
                kh[i * dh..(i + 1) * dh].copy_from_slice(&kv[i * d + off..i * d + off + dh]);
                vh[i * dh..(i + 1) * dh].copy_from_slice(&vv[i * d + off..i * d + off + dh]);
            }
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            let scores = mm_bt(&qh, &kh, n, dh, n);
            p.copy_from_slice(&scores);
            for row in p.chunks_mut(n) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_row(row);
            }
            let ctx = mm(p, &vh, n, n, dh);
            for i in 0..n {
                out[i * d + off..i * d + off + dh].copy_from_slice(&ctx[i * dh..(i + 1) * dh]);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Mhsa { q, k, v, n_heads, probs }, n, d, Storage::Owned(out), ng)
    }

    /// Row gather; works on embedding tables and on any matrix value.
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Var {
        let (r, c) = self.shape(src);
        let mut val = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < r, "gather row {id} out of {r}");
            val.extend_from_slice(&self.value(src)[id * c..(id + 1) * c]);
        }
        let ng = self.needs(src);
        self.push(Op::Gather { src, ids: ids.to_vec() }, ids.len(), c, Storage::Owned(val), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(c, cb, "concat_rows column mismatch");
        let mut val = self.value(a).to_vec();
        val.extend_from_slice(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows { a, b }, ra + rb, c, Storage::Owned(val), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        assert!(r > 0, "mean_rows of empty matrix");
        let mut val = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            for (o, v) in val.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in val.iter_mut() {
            *o /= r as f64;
        }
        let ng = self.needs(x);
        self.push(Op::MeanRows { x }, 1, c, Storage::Owned(val), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll { x }, 1, 1, Storage::Owned(vec![s]), ng)
    }

    /// Copy of `src` with whole rows replaced by `[1, cols]` vars.
    ///
    /// Gradient w.r.t. a replaced row goes to its replacement var only;
    /// `src` receives zero there.
    pub fn override_rows(&mut self, src: Var, rows: Vec<(usize, Var)>) -> Var {
        let (r, c) = self.shape(src);
        let mut val = self.value(src).to_vec();
        let mut seen = std::collections::HashSet::new();
        for &(ri, v) in &rows {
            assert!(ri < r, "override row {ri} out of {r}");
            assert!(seen.insert(ri), "row {ri} overridden twice");
            assert_eq!(self.shape(v), (1, c), "override row shape");
            val[ri * c..(ri + 1) * c].copy_from_slice(self.value(v));
        }
        let ng = self.needs(src) || rows.iter().any(|&(_, v)| self.needs(v));
        self.push(Op::OverrideRows { src, rows }, r, c, Storage::Owned(val), ng)
    }

    /// Copy of `src` with single entries replaced by `[1,1]` vars.
    pub fn override_entries(&mut self, src: Var, entries: Vec<(usize, usize, Var)>) -> Var {
        let (r, c) = self.shape(src);
        let mut val = self.value(src).to_vec();
        let mut seen = std::collections::HashSet::new();
        for &(ri, ci, v) in &entries {
            assert!(ri < r && ci < c, "override entry ({ri},{ci}) out of {r}x{c}");
            assert!(seen.insert((ri, ci)), "entry overridden twice");
            assert_eq!(self.shape(v), (1, 1), "override value must be scalar");
            val[ri * c + ci] = self.value(v)[0];
        }
        let ng = self.needs(src) || entries.iter().any(|&(_, _, v)| self.needs(v));
        self.push(Op::OverrideEntries { src, entries }, r, c, Storage::Owned(val), ng)
    }

    /// Sum over rows of cross-entropy against `targets` (one class per row).
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "one target per logits row");
        let mut total = 0.0;
        for (row, &t) in self.value(logits).chunks(c).zip(&targets) {
            assert!(t < c, "target {t} out of {c}");
            total += log_sum_exp(row) - row[t];
        }
        let ng = self.needs(logits);
        self.push(Op::CrossEntropySum { logits, targets }, 1, 1, Storage::Owned(vec![total]), ng)
    }

    /// Contrastive loss over a score column with the positive at index 0.
    pub fn info_nce(&mut self, scores: Var) -> Var {
        let (k, c) = self.shape(scores);
        assert_eq!(c, 1, "info_nce expects a column of scores");
        assert!(k >= 1);
        let s = self.value(scores);
        let loss = log_sum_exp(s) - s[0];
        let ng = self.needs(scores);
        self.push(Op::InfoNce { scores }, 1, 1, Storage::Owned(vec![loss]), ng)
    }

    /// softmax(scores)[target] for a full score column.
    pub fn target_prob(&mut self, scores: Var, target: usize) -> Var {
        let (v, c) = self.shape(scores);
        assert_eq!(c, 1, "target_prob expects a column of scores");
        assert!(target < v, "target {target} out of {v}");
        let mut p = self.value(scores).to_vec();
        softmax_row(&mut p);
        let ng = self.needs(scores);
        self.push(Op::TargetProb { scores, target }, 1, 1, Storage::Owned(vec![p[target]]), ng)
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(&mut self, parts: Vec<(Var, f64)>) -> Var {
        let mut total = 0.0;
        let mut ng = false;
        for &(v, w) in &parts {
            assert_eq!(self.shape(v), (1, 1), "weighted_sum over scalars only");
            total += w * self.value(v)[0];
            ng |= self.needs(v);
        }
        self.push(Op::WeightedSum { parts }, 1, 1, Storage::Owned(vec![total]), ng)
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fails on a non-scalar loss or when
    /// called a second time on an unchanged tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(Error::DoubleBackward);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        if !self.scalar_value(loss).is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.backward_ran = true;
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of `v` after backward; `None` when the loss does not
    /// reach it (a disconnected parameter has zero gradient, not an error).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc(&mut self, v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
        let slot = &mut self.grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; n]);
        add(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Ops are cheap to describe; values are read from the tape. Borrow
        // discipline: copy out whatever is needed before mutating grads.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.needs(a) {
                    let da = mm_bt(g, self.value(b), m, n, k);
                    self.acc(a, |buf| add_into(buf, &da));
                }
                if self.needs(b) {
                    let db = mm_at(self.value(a), g, m, k, n);
                    self.acc(b, |buf| add_into(buf, &db));
                }
            }
            Op::MatmulBt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let (n, _) = self.shape(b);
                if self.needs(a) {
                    let da = mm(g, self.value(b), m, n, k);
                    self.acc(a, |buf| add_into(buf, &da));
                }
                if self.needs(b) {
                    let db = mm_at(g, self.value(a), m, n, k);
                    self.acc(b, |buf| add_into(buf, &db));
                }
            }
            Op::AddMat { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, |buf| add_into(buf, g));
                self.acc(b, |buf| add_into(buf, g));
            }
            Op::AddRow { m, v } => {
                let (m, v) = (*m, *v);
                let (_, c) = self.shape(m);
                self.acc(m, |buf| add_into(buf, g));
                if self.needs(v) {
                    let mut dv = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (o, x) in dv.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.acc(v, |buf| add_into(buf, &dv));
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                    self.acc(a, |buf| add_into(buf, &da));
                }
                if self.needs(b) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    self.acc(b, |buf| add_into(buf, &db));
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.acc(a, |buf| add_into(buf, &da));
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f64> =
                    g.iter().zip(self.value(a)).map(|(gv, &x)| gv * gelu_deriv(x)).collect();
                self.acc(a, |buf| add_into(buf, &da));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let (r, c) = self.shape(x);
                let xv = self.value(x);
                let gv = self.value(gamma);
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ri in 0..r {
                    let xs = &xv[ri * c..(ri + 1) * c];
                    let gs = &g[ri * c..(ri + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gs.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let cf = c as f64;
                    for j in 0..c {
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                        dx[ri * c + j] = inv / cf * (cf * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                self.acc(x, |buf| add_into(buf, &dx));
                self.acc(gamma, |buf| add_into(buf, &dgamma));
                self.acc(beta, |buf| add_into(buf, &dbeta));
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let (r, c) = self.shape(x);
                let out = self.value(Var(i));
                let mut dx = vec![0.0; r * c];
                for ri in 0..r {
                    let p = &out[ri * c..(ri + 1) * c];
                    let gs = &g[ri * c..(ri + 1) * c];
                    let d = dot(gs, p);
                    for j in 0..c {
                        dx[ri * c + j] = p[j] * (gs[j] - d);
                    }
                }
                self.acc(x, |buf| add_into(buf, &dx));
            }
            Op::Mhsa { q, k, v, n_heads, probs } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let (n, d) = self.shape(q);
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let probs = probs.clone();
                let qv = self.value(q).to_vec();
                let kv = self.value(k).to_vec();
                let vv = self.value(v).to_vec();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut qh = vec![0.0; n * dh];
                let mut kh = vec![0.0; n * dh];
                let mut vh = vec![0.0; n * dh];
                let mut gh = vec![0.0; n * dh];
                for h in 0..n_heads {
                    let off = h * dh;
                    for iw in 0..n {
                        qh[iw * dh..(iw + 1) * dh]
                            .copy_from_slice(&qv[iw * d + off..iw * d + off + dh]);
                        kh[iw * dh..(iw + 1) * dh]
                            .copy_from_slice(&kv[iw * d + off..iw * d + off + dh]);
                        vh[iw * dh..(iw + 1) * dh]
                            .copy_from_slice(&vv[iw * d + off..iw * d + off + dh]);
                        gh[iw * dh..(iw + 1) * dh]
                            .copy_from_slice(&g[iw * d + off..iw * d + off + dh]);
                    }
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    // dP = gh @ Vh^T ; dVh = P^T @ gh
                    let dp = mm_bt(&gh, &vh, n, dh, n);
                    let dvh = mm_at(p, &gh, n, n, dh);
                    // softmax rows backward, then scale
                    let mut ds = vec![0.0; n * n];
                    for ri in 0..n {
                        let pr = &p[ri * n..(ri + 1) * n];
                        let dpr = &dp[ri * n..(ri + 1) * n];
                        let dd = dot(dpr, pr);
                        for j in 0..n {
                            ds[ri * n + j] = pr[j] * (dpr[j] - dd) * scale;
                        }
                    }
                    let dqh = mm(&ds, &kh, n, n, dh);
                    let dkh = mm_at(&ds, &qh, n, n, dh);
                    for iw in 0..n {
                        dq[iw * d + off..iw * d + off + dh]
                            .copy_from_slice(&dqh[iw * dh..(iw + 1) * dh]);
                        dk[iw * d + off..iw * d + off + dh]
                            .copy_from_slice(&dkh[iw * dh..(iw + 1) * dh]);
                        dv[iw * d + off..iw * d + off + dh]
                            .copy_from_slice(&dvh[iw * dh..(iw + 1) * dh]);
                    }
                }
                self.acc(q, |buf| add_into(buf, &dq));
                self.acc(k, |buf| add_into(buf, &dk));
                self.acc(v, |buf| add_into(buf, &dv));
            }
            Op::Gather { src, ids } => {
                let src = *src;
                let ids = ids.clone();
                let (_, c) = self.shape(src);
                self.acc(src, |buf| {
                    for (pos, &id) in ids.iter().enumerate() {
                        let gr = &g[pos * c..(pos + 1) * c];
                        let br = &mut buf[id * c..(id + 1) * c];
                        add_into(br, gr);
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let (ra, c) = self.shape(a);
                self.acc(a, |buf| add_into(buf, &g[..ra * c]));
                self.acc(b, |buf| add_into(buf, &g[ra * c..]));
            }
            Op::MeanRows { x } => {
                let x = *x;
                let (r, c) = self.shape(x);
                let w = 1.0 / r as f64;
                self.acc(x, |buf| {
                    for row in buf.chunks_mut(c) {
                        for (o, gv) in row.iter_mut().zip(g) {
                            *o += gv * w;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let x = *x;
                let gv = g[0];
                self.acc(x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::OverrideRows { src, rows } => {
                let src = *src;
                let rows = rows.clone();
                let (_, c) = self.shape(src);
                if self.needs(src) {
                    let mut gs = g.to_vec();
                    for &(ri, _) in &rows {
                        gs[ri * c..(ri + 1) * c].fill(0.0);
                    }
                    self.acc(src, |buf| add_into(buf, &gs));
                }
                for &(ri, v) in &rows {
                    if self.needs(v) {
                        let gr = g[ri * c..(ri + 1) * c].to_vec();
                        self.acc(v, |buf| add_into(buf, &gr));
                    }
                }
            }
            Op::OverrideEntries { src, entries } => {
                let src = *src;
                let entries = entries.clone();
                let (_, c) = self.shape(src);
                if self.needs(src) {
                    let mut gs = g.to_vec();
                    for &(ri, ci, _) in &entries {
                        gs[ri * c + ci] = 0.0;
                    }
                    self.acc(src, |buf| add_into(buf, &gs));
                }
                for &(ri, ci, v) in &entries {
                    if self.needs(v) {
                        let gv = g[ri * c + ci];
                        self.acc(v, |buf| buf[0] += gv);
                    }
                }
            }
            Op::CrossEntropySum { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let (r, c) = self.shape(logits);
                let lv = self.value(logits);
                let mut dl = vec![0.0; r * c];
                for ri in 0..r {
                    let row = &lv[ri * c..(ri + 1) * c];
                    let mut p = row.to_vec();
                    softmax_row(&mut p);
                    p[targets[ri]] -= 1.0;
                    for j in 0..c {
                        dl[ri * c + j] = g[0] * p[j];
                    }
                }
                self.acc(logits, |buf| add_into(buf, &dl));
            }
            Op::InfoNce { scores } => {
                let scores = *scores;
                let mut p = self.value(scores).to_vec();
                softmax_row(&mut p);
                p[0] -= 1.0;
                for v in p.iter_mut() {
                    *v *= g[0];
                }
                self.acc(scores, |buf| add_into(buf, &p));
            }
            Op::TargetProb { scores, target } => {
                let (scores, target) = (*scores, *target);
                let mut p = self.value(scores).to_vec();
                softmax_row(&mut p);
                let pt = p[target];
                let mut ds: Vec<f64> = p.iter().map(|&pi| -g[0] * pt * pi).collect();
                ds[target] += g[0] * pt;
                self.acc(scores, |buf| add_into(buf, &ds));
            }
            Op::WeightedSum { parts } => {
                let parts = parts.clone();
                for (v, w) in parts {
                    let gv = g[0] * w;
                    self.acc(v, |buf| buf[0] += gv);
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
