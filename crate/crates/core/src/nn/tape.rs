//! Reverse-mode differentiation over vectors.
//!
//! A [`Tape`] records one forward computation. Nodes hold plain `Vec<f64>`
//! values; parameters are read from a borrowed [`ParamStore`] and their
//! gradients are accumulated into a [`Gradients`] buffer by
//! [`Tape::backward`]. Node indices grow monotonically, so every operand of
//! node `i` has an index below `i` and a single reverse sweep suffices.

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Parameter handles of one GRU cell.
///
/// `wx` is `[3H, I]`, `wh` is `[3H, H]` and `b` is `[3H]`; rows are stacked
/// as update gate, reset gate, candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Row {
        table: ParamId,
        row: usize,
    },
    Linear {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    SumAll(Vec<Var>),
    Dot(Var, Var),
    Gru {
        x: Var,
        h: Var,
        p: GruParams,
        z: Vec<f64>,
        r: Vec<f64>,
        n: Vec<f64>,
        rh: Vec<f64>,
    },
    Attention {
        query: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BceLogit {
        logit: Var,
        label: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `log(sum(exp(logits)))` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[i * cols..(i + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Forward pass of one GRU cell; returns `(h', z, r, n, r*h)`.
pub(crate) fn gru_forward(
    store: &ParamStore,
    p: &GruParams,
    x: &[f64],
    h: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = p.hidden_dim;
    let wx = store.values(p.wx);
    let wh = store.values(p.wh);
    let mut ax = store.values(p.b).to_vec();
    matvec(wx, 3 * hd, p.input_dim, x, &mut ax);
    let mut ah = vec![0.0; 2 * hd];
    matvec(&wh[..2 * hd * hd], 2 * hd, hd, h, &mut ah);
    let z: Vec<f64> = (0..hd).map(|i| sigmoid(ax[i] + ah[i])).collect();
    let r: Vec<f64> = (0..hd).map(|i| sigmoid(ax[hd + i] + ah[hd + i])).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let mut an = ax[2 * hd..].to_vec();
    matvec(&wh[2 * hd * hd..], hd, hd, &rh, &mut an);
    let n: Vec<f64> = an.iter().map(|v| v.tanh()).collect();
    let out = (0..hd).map(|i| (1.0 - z[i]) * h[i] + z[i] * n[i]).collect();
    (out, z, r, n, rh)
}

fn attention_weights(query: &[f64], keys: &[&[f64]]) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    softmax(&scores)
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    /// A constant; gradients stop here.
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.store.values(id).to_vec();
        self.push(v, Op::Param(id))
    }

    /// Row `row` of a `[rows, cols]` table (embedding lookup).
    pub fn row(&mut self, table: ParamId, row: usize) -> Var {
        let t = self.store.get(table);
        let cols = t.shape()[1];
        let v = t.values()[row * cols..(row + 1) * cols].to_vec();
        self.push(v, Op::Row { table, row })
    }

    /// `W x (+ b)` with `W` of shape `[out, in]`.
    pub fn linear(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = self.store.get(w);
        let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
        debug_assert_eq!(cols, self.value(x).len(), "linear input dim");
        let mut out = match b {
            Some(b) => self.store.values(b).to_vec(),
            None => vec![0.0; rows],
        };
        matvec(wt.values(), rows, cols, self.value(x), &mut out);
        self.push(out, Op::Linear { w, b, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(v, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(v, Op::Exp(a))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(v, Op::Clamp { x, lo, hi })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x)[start..start + len].to_vec();
        self.push(v, Op::Slice { x, start })
    }

    /// Sum of entries, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], Op::Sum(x))
    }

    /// Elementwise sum of equally shaped nodes, accumulated in list order.
    pub fn sum_all(&mut self, parts: &[Var]) -> Var {
        let mut v = vec![0.0; self.value(parts[0]).len()];
        for &p in parts {
            for (a, b) in v.iter_mut().zip(self.value(p)) {
                *a += b;
            }
        }
        self.push(v, Op::SumAll(parts.to_vec()))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn gru(&mut self, p: GruParams, x: Var, h: Var) -> Var {
        let (out, z, r, n, rh) = gru_forward(self.store, &p, self.value(x), self.value(h));
        self.push(out, Op::Gru { x, h, p, z, r, n, rh })
    }

    /// Dot-product attention: softmax over `query . keys[i]`, weighted sum of
    /// `values[i]`. Returns the context and the attention weights.
    pub fn attention(&mut self, query: Var, keys: &[Var], values: &[Var]) -> (Var, Vec<f64>) {
        debug_assert_eq!(keys.len(), values.len());
        let key_vals: Vec<&[f64]> = keys.iter().map(|&k| self.value(k)).collect();
        let weights = attention_weights(self.value(query), &key_vals);
        let dim = self.value(values[0]).len();
        let mut ctx = vec![0.0; dim];
        for (w, &v) in weights.iter().zip(values) {
            for (c, x) in ctx.iter_mut().zip(self.value(v)) {
                *c += w * x;
            }
        }
        let out = self.push(
            ctx,
            Op::Attention {
                query,
                keys: keys.to_vec(),
                values: values.to_vec(),
                weights: weights.clone(),
            },
        );
        (out, weights)
    }

    /// `-log softmax(logits)[target]` as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        let loss = log_sum_exp(l) - l[target];
        let probs = softmax(l);
        self.push(vec![loss], Op::CrossEntropy { logits, target, probs })
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label` in `[0, 1]`.
    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Var {
        let l = self.scalar(logit);
        let loss = l.max(0.0) - l * label + (-l.abs()).exp().ln_1p();
        self.push(vec![loss], Op::BceLogit { logit, label })
    }

    /// Probabilities cached by a cross-entropy node.
    pub fn probs(&self, ce: Var) -> Option<&[f64]> {
        match &self.nodes[ce.0].op {
            Op::CrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates `seed * d(root)` into `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Gradients) {
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![seed; self.nodes[root.0].value.len()]);

        fn acc<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in grads.get_mut(*id).iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Row { table, row } => {
                    let cols = g.len();
                    let buf = &mut grads.get_mut(*table)[row * cols..(row + 1) * cols];
                    for (a, b) in buf.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Linear { w, b, x } => {
                    let wt = self.store.get(*w);
                    let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
                    let xv = &nodes[x.0].value;
                    {
                        let gw = grads.get_mut(*w);
                        for r in 0..rows {
                            if g[r] == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            for (a, xi) in row.iter_mut().zip(xv) {
                                *a += g[r] * xi;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (a, gi) in grads.get_mut(*b).iter_mut().zip(&g) {
                            *a += gi;
                        }
                    }
                    let dx = acc(&mut adj, nodes, *x);
                    let wv = wt.values();
                    for r in 0..rows {
                        if g[r] == 0.0 {
                            continue;
                        }
                        let row = &wv[r * cols..(r + 1) * cols];
                        for (d, wi) in dx.iter_mut().zip(row) {
                            *d += g[r] * wi;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, nodes, *a), &g, 1.0);
                    add_into(acc(&mut adj, nodes, *b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, nodes, *a), &g, 1.0);
                    add_into(acc(&mut adj, nodes, *b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(acc(&mut adj, nodes, *a), &da, 1.0);
                    add_into(acc(&mut adj, nodes, *b), &db, 1.0);
                }
                Op::Scale(a, k) => add_into(acc(&mut adj, nodes, *a), &g, *k),
                Op::Sigmoid(a) => {
                    let d = acc(&mut adj, nodes, *a);
                    for ((d, gi), y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let d = acc(&mut adj, nodes, *a);
                    for ((d, gi), y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    let d = acc(&mut adj, nodes, *a);
                    for ((d, gi), y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * y;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &nodes[x.0].value;
                    let gated: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, v)| if v > lo && v < hi { *gi } else { 0.0 })
                        .collect();
                    add_into(acc(&mut adj, nodes, *x), &gated, 1.0);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        add_into(acc(&mut adj, nodes, p), &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let d = acc(&mut adj, nodes, *x);
                    for (k, gi) in g.iter().enumerate() {
                        d[start + k] += gi;
                    }
                }
                Op::Sum(x) => {
                    let d = acc(&mut adj, nodes, *x);
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::SumAll(parts) => {
                    for &p in parts {
                        add_into(acc(&mut adj, nodes, p), &g, 1.0);
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    add_into(acc(&mut adj, nodes, *a), bv, g[0]);
                    add_into(acc(&mut adj, nodes, *b), av, g[0]);
                }
                Op::Gru { x, h, p, z, r, n, rh } => {
                    let hd = p.hidden_dim;
                    let hv = &nodes[h.0].value;
                    let xv = &nodes[x.0].value;
                    let wh = self.store.values(p.wh);
                    let wx = self.store.values(p.wx);
                    // dax = [d(update pre), d(reset pre), d(candidate pre)]
                    let mut dax = vec![0.0; 3 * hd];
                    let mut dh = vec![0.0; hd];
                    for k in 0..hd {
                        let dz = g[k] * (n[k] - hv[k]);
                        let dn = g[k] * z[k];
                        dh[k] += g[k] * (1.0 - z[k]);
                        dax[k] = dz * z[k] * (1.0 - z[k]);
                        dax[2 * hd + k] = dn * (1.0 - n[k] * n[k]);
                    }
                    // candidate: an = ... + Wh_n (r*h)
                    let wh_n = &wh[2 * hd * hd..];
                    let mut drh = vec![0.0; hd];
                    for row in 0..hd {
                        let d = dax[2 * hd + row];
                        if d == 0.0 {
                            continue;
                        }
                        for (acc_, w) in drh.iter_mut().zip(&wh_n[row * hd..(row + 1) * hd]) {
                            *acc_ += d * w;
                        }
                    }
                    for k in 0..hd {
                        let dr = drh[k] * hv[k];
                        dh[k] += drh[k] * r[k];
                        dax[hd + k] = dr * r[k] * (1.0 - r[k]);
                    }
                    {
                        let gb = grads.get_mut(p.b);
                        for (a, d) in gb.iter_mut().zip(&dax) {
                            *a += d;
                        }
                    }
                    {
                        let gwx = grads.get_mut(p.wx);
                        let cols = p.input_dim;
                        for (row, &d) in dax.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            for (a, xi) in gwx[row * cols..(row + 1) * cols].iter_mut().zip(xv) {
                                *a += d * xi;
                            }
                        }
                    }
                    {
                        let gwh = grads.get_mut(p.wh);
                        for (row, &d) in dax.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            let src: &[f64] = if row < 2 * hd { hv } else { rh };
                            for (a, si) in gwh[row * hd..(row + 1) * hd].iter_mut().zip(src) {
                                *a += d * si;
                            }
                        }
                    }
                    // reset/update gates read h through Wh[0..2H]
                    for (row, &d) in dax.iter().enumerate().take(2 * hd) {
                        if d == 0.0 {
                            continue;
                        }
                        for (acc_, w) in dh.iter_mut().zip(&wh[row * hd..(row + 1) * hd]) {
                            *acc_ += d * w;
                        }
                    }
                    let mut dx = vec![0.0; p.input_dim];
                    let cols = p.input_dim;
                    for (row, &d) in dax.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (acc_, w) in dx.iter_mut().zip(&wx[row * cols..(row + 1) * cols]) {
                            *acc_ += d * w;
                        }
                    }
                    add_into(acc(&mut adj, nodes, *h), &dh, 1.0);
                    add_into(acc(&mut adj, nodes, *x), &dx, 1.0);
                }
                Op::Attention {
                    query,
                    keys,
                    values,
                    weights,
                } => {
                    // d weight_i = g . v_i ; d score = w * (dw - sum_j w_j dw_j)
                    let dw: Vec<f64> = values
                        .iter()
                        .map(|v| g.iter().zip(&nodes[v.0].value).map(|(a, b)| a * b).sum())
                        .collect();
                    let mean: f64 = weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
                    let qv = nodes[query.0].value.clone();
                    let mut dq = vec![0.0; qv.len()];
                    for (i, (&k, &v)) in keys.iter().zip(values).enumerate() {
                        let ds = weights[i] * (dw[i] - mean);
                        add_into(&mut dq, &nodes[k.0].value, ds);
                        add_into(acc(&mut adj, nodes, k), &qv, ds);
                        add_into(acc(&mut adj, nodes, v), &g, weights[i]);
                    }
                    add_into(acc(&mut adj, nodes, *query), &dq, 1.0);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let d = acc(&mut adj, nodes, *logits);
                    for (k, (dk, p)) in d.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *dk += g[0] * (p - onehot);
                    }
                }
                Op::BceLogit { logit, label } => {
                    let l = nodes[logit.0].value[0];
                    let d = acc(&mut adj, nodes, *logit);
                    d[0] += g[0] * (sigmoid(l) - label);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += k * b;
    }
}
