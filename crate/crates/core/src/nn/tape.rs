//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough saved state for
//! the vector-Jacobian product. Nodes are appended in evaluation order, so a
//! single reverse sweep over node indices is a valid topological order and
//! visits each node once.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::ops::{self, LAYER_NORM_EPS};
use crate::nn::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Contiguous run of rows forming one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask {
    Causal,
    Bidirectional,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<Segment>,
        heads: usize,
        mask: AttentionMask,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Recorded operation graph plus the registry of trainable leaves.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    params: Vec<usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<usize>,
    visited: usize,
}

impl Gradients {
    /// Gradient w.r.t. `var`; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `var`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> Vec<Option<&Tensor>> {
        self.params.iter().map(|&p| self.grads[p].as_ref()).collect()
    }

    /// Number of nodes that received a gradient during the sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { id: self.nodes.len() - 1, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} is not recorded on tape {}", self.id)));
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf)
    }

    /// Records a constant without copying it.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    /// Registers a trainable leaf whose gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let v = self.push(Cow::Borrowed(t), Op::Leaf);
        self.params.push(v.id);
        v
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let v = self.push(Cow::Owned(t), Op::Leaf);
        self.params.push(v.id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Cow::Owned(out), Op::MatMul(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(Cow::Owned(out), Op::Add(ia, ib)))
    }

    /// Adds a length-`m` vector to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if b.numel() != x.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", x.shape(), b.shape())));
        }
        let m = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(Cow::Owned(out), Op::AddRow(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(Cow::Owned(out), Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        Ok(self.push(Cow::Owned(out), Op::Scale(ia, c)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(ia)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(ops::gelu);
        Ok(self.push(Cow::Owned(out), Op::Gelu(ia)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let axis = x.shape().len().saturating_sub(1);
        let out = ops::softmax(x, axis)?;
        Ok(self.push(Cow::Owned(out), Op::Softmax(ia)))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (xt, g, b) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let m = xt.cols();
        if g.numel() != m || b.numel() != m {
            return Err(Error::Shape(format!(
                "layer_norm over {m} features with gain {:?}, bias {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let n = xt.rows();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[r * m + j] = h;
                out[r * m + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(Cow::Owned(out), Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std }))
    }

    /// Selects rows `ids` of a `(V × d)` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let t = &self.nodes[it].value;
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("gather from non-matrix {:?}", t.shape())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Input(format!("row id {bad} outside table of {} rows", t.rows())));
        }
        let out = t.select_rows(ids);
        Ok(self.push(Cow::Owned(out), Op::Gather { table: it, ids: ids.to_vec() }))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `(rows × d)`; heads split the feature axis evenly and
    /// attention never crosses segment boundaries.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        mask: AttentionMask,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (qt, kt, vt) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        if qt.shape() != kt.shape() || qt.shape() != vt.shape() || qt.shape().len() != 2 {
            return Err(Error::Shape("attention q/k/v must share a matrix shape".into()));
        }
        let (n, d) = (qt.rows(), qt.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} features cannot split into {heads} heads")));
        }
        if segments.iter().map(|s| s.len).sum::<usize>() != n || segments.iter().any(|s| s.start + s.len > n) {
            return Err(Error::Shape("attention segments do not tile the rows".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let prob_len: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut base = 0;
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d..][cols.clone()];
                    let keys = match mask {
                        AttentionMask::Causal => i + 1,
                        AttentionMask::Bidirectional => len,
                    };
                    let p = &mut probs[base + i * len..base + i * len + keys];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(seg.start + j) * d..][cols.clone()];
                        *pj = ops::dot(qi, kj) * scale;
                    }
                    ops::softmax_in_place(p);
                    let o = &mut out[(seg.start + i) * d..][cols.clone()];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d..][cols.clone()];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
                base += len * len;
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention { q: iq, k: ik, v: iv, segments: segments.to_vec(), heads, mask, probs },
        ))
    }

    /// `Σᵢ wᵢ · CE(logitsᵢ, targetᵢ)` as a scalar.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let il = self.check(logits)?;
        let lt = &self.nodes[il].value;
        ops::check_ce_inputs(lt, targets, weights)?;
        let v = lt.cols();
        let mut probs = vec![0.0; lt.numel()];
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = lt.row(i);
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            ops::softmax_in_place(p);
            loss += w * (ops::log_sum_exp(row) - row[t]);
        }
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        ))
    }

    /// Mean cross-entropy over masked positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let weights = ops::mask_weights(mask)?;
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { tape: self.id, grads, params: self.params.clone(), visited })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (at.rows(), at.cols(), bt.cols());
                ops::matmul_a_bt_into(g, bt.data(), slot(grads, *a, n * k), n, m, k);
                ops::matmul_at_b_into(at.data(), g, slot(grads, *b, k * m), n, k, m);
            }
            Op::Add(a, b) => {
                accumulate(slot(grads, *a, g.len()), g);
                accumulate(slot(grads, *b, g.len()), g);
            }
            Op::AddRow(a, b) => {
                accumulate(slot(grads, *a, g.len()), g);
                let m = self.nodes[*b].value.numel();
                let gb = slot(grads, *b, m);
                for row in g.chunks(m) {
                    accumulate(gb, row);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let ga = slot(grads, *a, g.len());
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * yv;
                }
                let gb = slot(grads, *b, g.len());
                for ((o, gv), xv) in gb.iter_mut().zip(g).zip(x) {
                    *o += gv * xv;
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                for (o, gv) in ga.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                for o in slot(grads, *a, n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                let ga = slot(grads, *a, g.len());
                for ((o, gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    *o += gv * ops::gelu_grad(xv);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let m = y.cols();
                let ga = slot(grads, *a, g.len());
                for ((o, gr), yr) in ga.chunks_mut(m).zip(g.chunks(m)).zip(y.data().chunks(m)) {
                    let s = ops::dot(gr, yr);
                    for ((ov, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *ov += yv * (gv - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gn = self.nodes[*gain].value.data();
                let m = gn.len();
                let n = inv_std.len();
                {
                    let gg = slot(grads, *gain, m);
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for ((o, gv), hv) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gv * hv;
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, m);
                    for gr in g.chunks(m) {
                        accumulate(gb, gr);
                    }
                }
                let gx = slot(grads, *x, n * m);
                let mut dh = vec![0.0; m];
                for r in 0..n {
                    let gr = &g[r * m..(r + 1) * m];
                    let hr = &xhat[r * m..(r + 1) * m];
                    for j in 0..m {
                        dh[j] = gr[j] * gn[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / m as f64;
                    let mean_dh_h = ops::dot(&dh, hr) / m as f64;
                    let out = &mut gx[r * m..(r + 1) * m];
                    for j in 0..m {
                        out[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let t = &self.nodes[*table].value;
                let d = t.cols();
                let gt = slot(grads, *table, t.numel());
                for (r, &id) in ids.iter().enumerate() {
                    accumulate(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Attention { q, k, v, segments, heads, mask, probs } => {
                self.attention_backward(g, grads, (*q, *k, *v), segments, *heads, *mask, probs);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let lt = &self.nodes[*logits].value;
                let vsz = lt.cols();
                let gl = slot(grads, *logits, lt.numel());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = g[0] * w;
                    let out = &mut gl[r * vsz..(r + 1) * vsz];
                    for (o, p) in out.iter_mut().zip(&probs[r * vsz..(r + 1) * vsz]) {
                        *o += c * p;
                    }
                    out[t] -= c;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (usize, usize, usize),
        segments: &[Segment],
        heads: usize,
        mask: AttentionMask,
        probs: &[f64],
    ) {
        let (qt, kt, vt) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let (n, d) = (qt.rows(), qt.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut base = 0;
        let mut ds = Vec::new();
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let keys = match mask {
                        AttentionMask::Causal => i + 1,
                        AttentionMask::Bidirectional => len,
                    };
                    let p = &probs[base + i * len..base + i * len + keys];
                    let gi = &g[(seg.start + i) * d..][cols.clone()];
                    ds.clear();
                    let mut weighted = 0.0;
                    for (j, &pj) in p.iter().enumerate() {
                        let row = (seg.start + j) * d;
                        let dp = ops::dot(gi, &vd[row..][cols.clone()]);
                        for (o, &gc) in dv[row..][cols.clone()].iter_mut().zip(gi) {
                            *o += pj * gc;
                        }
                        ds.push(dp);
                        weighted += pj * dp;
                    }
                    let qi = &qd[(seg.start + i) * d..][cols.clone()];
                    for (j, &pj) in p.iter().enumerate() {
                        let s = pj * (ds[j] - weighted) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let row = (seg.start + j) * d;
                        let kj = &kd[row..][cols.clone()];
                        for (o, &kc) in dq[(seg.start + i) * d..][cols.clone()].iter_mut().zip(kj) {
                            *o += s * kc;
                        }
                        for (o, &qc) in dk[row..][cols.clone()].iter_mut().zip(qi) {
                            *o += s * qc;
                        }
                    }
                }
                base += len * len;
            }
        }
        accumulate(slot(grads, q, n * d), &dq);
        accumulate(slot(grads, k, n * d), &dk);
        accumulate(slot(grads, v, n * d), &dv);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
