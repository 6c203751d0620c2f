//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are 2-D
//! matrices (vectors are `1 x n`, scalars `1 x 1`). Parameters enter as
//! leaves copied out of a [`ParamSet`]; after [`Graph::backward`] the
//! accumulated leaf gradients are added back with
//! [`Graph::accumulate_into`], which only touches leaves carrying the set's
//! tag.
//!
//! [`Graph::stop_grad`] is an edge marker: the node aliases its input's
//! value and never propagates gradient.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{ParamSet, SetTag};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    fn ix(self) -> usize {
        self.0 as usize
    }
}

/// Floor applied to the live model's probability inside the KL ratio.
pub const KL_PROB_FLOOR: f64 = 1e-12;

const RMS_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    StopGrad(NodeId),
    Embed { table: NodeId, indices: Vec<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<f64> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Rows { x: NodeId, start: usize },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    SigmoidBce { logits: NodeId, labels: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
    KlRatio { ce: NodeId, ratios: Vec<f64>, active: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    /// Empty for stop-gradient aliases.
    value: Vec<f64>,
    op: Op,
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<(SetTag, usize), NodeId>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert!(matches!(op, Op::StopGrad(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        NodeId((self.nodes.len() - 1) as u32)
    }

    fn resolve(&self, mut id: NodeId) -> NodeId {
        while let Op::StopGrad(inner) = self.nodes[id.ix()].op {
            id = inner;
        }
        id
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[self.resolve(id).ix()].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.ix()];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    pub fn row(&self, id: NodeId, r: usize) -> &[f64] {
        let cols = self.nodes[id.ix()].cols;
        &self.value(id)[r * cols..(r + 1) * cols]
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(alloc::format!(
                "input {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Input))
    }

    /// Leaf for parameter `idx` of `set`. Repeated calls return the same
    /// node, so all uses share one gradient buffer.
    pub fn param(&mut self, set: &ParamSet, idx: usize) -> NodeId {
        let key = (set.tag(), idx);
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let p = set.get(idx);
        let (rows, cols) = p.value.as_matrix_dims();
        let id = self.push(rows, cols, p.value.data().to_vec(), Op::Param);
        self.params.insert(key, id);
        id
    }

    /// Stop-gradient marker: same value, no gradient flows through.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.dims(x);
        self.push(rows, cols, Vec::new(), Op::StopGrad(x))
    }

    /// Gathers rows of `table` (V x d) at `indices`.
    pub fn embed_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims(table);
        if indices.is_empty() {
            return Err(Error::Shape("embedding lookup with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        {
            let t = self.value(table);
            for &i in indices {
                if i >= v {
                    return Err(Error::OutOfRange { what: "embedding index", index: i, bound: v });
                }
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(indices.len(), d, out, Op::Embed { table, indices: indices.to_vec() }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(alloc::format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, w) in orow.iter_mut().zip(brow) {
                        *o += x * w;
                    }
                }
            }
        }
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.dims(a);
        if da != self.dims(b) {
            return Err(Error::Shape(alloc::format!("add {:?} and {:?}", da, self.dims(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(da.0, da.1, out, Op::Add(a, b)))
    }

    /// `x + 1ᵀb`: adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if self.dims(b) != (1, n) {
            return Err(Error::Shape(alloc::format!("bias {:?} for {m}x{n}", self.dims(b))));
        }
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        Ok(self.push(m, n, out, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(m, n, out, Op::Scale(x, s))
    }

    /// `y = xW + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(m, n, out, Op::Gelu(x))
    }

    /// Row-wise RMS normalisation with a learned gain (1 x cols).
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) {
            return Err(Error::Shape("rms gain must be 1 x cols".into()));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_rms = Vec::with_capacity(m);
        for row in xv.chunks(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / math::sqrt(ms + RMS_EPS);
            inv_rms.push(r);
            out.extend(row.iter().zip(gv).map(|(v, g)| v * r * g));
        }
        Ok(self.push(m, n, out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.dims(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.row(p, r));
            }
        }
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.dims(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(Error::Shape("concat_rows column counts differ".into()));
        }
        let m: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start .. start + count` of `x`.
    pub fn rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if count == 0 || start + count > m {
            return Err(Error::OutOfRange { what: "row slice end", index: start + count, bound: m });
        }
        let out = self.value(x)[start * n..(start + count) * n].to_vec();
        Ok(self.push(count, n, out, Op::Rows { x, start }))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![s], Op::Mean(x))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum::<f64>();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Weighted sum of scalar nodes; zero weights are skipped entirely so
    /// their subgraphs receive no gradient.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<Option<NodeId>> {
        let mut acc: Option<NodeId> = None;
        for &(node, w) in terms {
            if w == 0.0 {
                continue;
            }
            if self.dims(node) != (1, 1) {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            let term = if w == 1.0 { node } else { self.scale(node, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        Ok(acc)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is m x d, `k` and `v` are n x d. With `causal_offset = Some(o)`
    /// query row `i` sees key rows `0 ..= i + o`; `None` disables masking.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal_offset: Option<usize>,
    ) -> Result<NodeId> {
        let (m, d) = self.dims(q);
        let (n, dk) = self.dims(k);
        if self.dims(v) != (n, dk) || dk != d {
            return Err(Error::Shape("attention q/k/v widths differ".into()));
        }
        if n == 0 {
            return Err(Error::Shape("attention over zero keys".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(alloc::format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..m {
                let limit = match causal_offset {
                    Some(o) => (i + o + 1).min(n),
                    None => n,
                };
                let p = &mut probs[(h * m + i) * n..(h * m + i) * n + n];
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..limit {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for pj in p[..limit].iter_mut() {
                    *pj = math::exp(*pj - max);
                    total += *pj;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..limit {
                    p[j] /= total;
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p[j] * x;
                    }
                }
            }
        }
        Ok(self.push(m, d, out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Single-query attention pooling: `Σ softmax(keys·query / sqrt(d))_i values_i`.
    pub fn attention_pool(&mut self, query: NodeId, keys: NodeId, values: NodeId) -> Result<NodeId> {
        if self.dims(query).0 != 1 {
            return Err(Error::Shape("attention_pool query must be one row".into()));
        }
        self.attention(query, keys, values, 1, None)
    }

    /// Per-row softmax cross-entropy; returns an n x 1 column of losses.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, k) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Shape(alloc::format!("{} targets for {m} rows", targets.len())));
        }
        let lv = self.value(logits);
        if let Some(pos) = lv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("logit {pos}")));
        }
        let mut probs = lv.to_vec();
        let mut out = Vec::with_capacity(m);
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::OutOfRange { what: "target token", index: t, bound: k });
            }
            let row = &mut probs[r * k..(r + 1) * k];
            math::log_softmax_in_place(row);
            out.push(-row[t]);
            for p in row.iter_mut() {
                *p = math::exp(*p);
            }
        }
        Ok(self.push(m, 1, out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Summed binary cross-entropy of sigmoid logits against 0/1 labels.
    pub fn sigmoid_bce(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(Error::Shape(alloc::format!("{} labels for {} logits", labels.len(), lv.len())));
        }
        if let Some(pos) = lv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("logit {pos}")));
        }
        let loss = lv.iter().zip(labels).map(|(&x, &y)| bce_with_logit(x, y)).sum();
        Ok(self.push(1, 1, vec![loss], Op::SigmoidBce { logits, labels: labels.to_vec() }))
    }

    /// Mean over tokens of `r - ln r - 1`, `r = P_ref / max(P_live, floor)`.
    ///
    /// `ce` holds the live model's per-token cross-entropies (n x 1, i.e.
    /// `-ln P_live`); `ref_logp` the reference model's log-probabilities of
    /// the same tokens, treated as constants.
    pub fn kl_ratio(&mut self, ce: NodeId, ref_logp: &[f64]) -> Result<NodeId> {
        let (n, c) = self.dims(ce);
        if c != 1 || ref_logp.len() != n {
            return Err(Error::Shape("kl_ratio expects an n x 1 column and n reference log-probs".into()));
        }
        let cev = self.value(ce);
        let mut ratios = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        let mut total = 0.0;
        for (&l, &rl) in cev.iter().zip(ref_logp) {
            let p_live = math::exp(-l);
            let (log_live, on) = if p_live > KL_PROB_FLOOR {
                (-l, true)
            } else {
                (math::ln(KL_PROB_FLOOR), false)
            };
            let log_r = rl - log_live;
            let r = math::exp(log_r);
            total += r - log_r - 1.0;
            ratios.push(r);
            active.push(on);
        }
        Ok(self.push(1, 1, vec![total / n as f64], Op::KlRatio { ce, ratios, active }))
    }

    /// Gradient of the accumulated leaf for `set`'s parameter `idx`.
    pub fn param_grad(&self, tag: SetTag, idx: usize) -> Option<&[f64]> {
        let id = self.params.get(&(tag, idx))?;
        self.grads.get(id.ix())?.as_deref()
    }

    /// Adds this graph's leaf gradients into the matching parameters.
    pub fn accumulate_into(&self, set: &mut ParamSet) {
        for (&(tag, idx), &id) in &self.params {
            if tag != set.tag() {
                continue;
            }
            if let Some(Some(g)) = self.grads.get(id.ix()) {
                for (dst, src) in set.get_mut(idx).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.ix()] = Some(vec![1.0]);
        for id in (0..=loss.ix()).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let len = self.nodes[id.ix()].rows * self.nodes[id.ix()].cols;
        self.grads[id.ix()].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Ops are moved out temporarily so node values stay borrowable.
        let op = core::mem::replace(&mut self.nodes[id].op, Op::Input);
        let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
        match &op {
            Op::Input | Op::Param | Op::StopGrad(_) => {}
            Op::Embed { table, indices } => {
                let d = cols;
                let buf = self.grad_buf(*table);
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, src) in buf[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let bv = self.value(*b).to_vec();
                let ga = self.grad_buf(*a);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(gi, &bv[p * n..(p + 1) * n]);
                    }
                }
                let av = self.value(*a).to_vec();
                let gb = self.grad_buf(*b);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (dst, gg) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *dst += x * gg;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.grad_buf(*a), g);
                add_into(self.grad_buf(*b), g);
            }
            Op::AddRow(x, b) => {
                add_into(self.grad_buf(*x), g);
                let gb = self.grad_buf(*b);
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                for (dst, src) in self.grad_buf(*x).iter_mut().zip(g) {
                    *dst += s * src;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).to_vec();
                for ((dst, src), v) in self.grad_buf(*x).iter_mut().zip(g).zip(xv) {
                    *dst += src * gelu_grad(v);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let n = cols;
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gain).to_vec();
                let mut gx = vec![0.0; rows * n];
                let mut gg = vec![0.0; n];
                for r in 0..rows {
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let inv = inv_rms[r];
                    let mut proj = 0.0;
                    for j in 0..n {
                        proj += gr[j] * gv[j] * xr[j];
                        gg[j] += gr[j] * xr[j] * inv;
                    }
                    let c = inv * inv * inv * proj / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv * gv[j] * gr[j] - c * xr[j];
                    }
                }
                add_into(self.grad_buf(*x), &gx);
                add_into(self.grad_buf(*gain), &gg);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    let buf = self.grad_buf(p);
                    for r in 0..rows {
                        add_into(
                            &mut buf[r * pc..(r + 1) * pc],
                            &g[r * cols + offset..r * cols + offset + pc],
                        );
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p).0 * cols;
                    add_into(self.grad_buf(p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Rows { x, start } => {
                let s = *start * cols;
                add_into(&mut self.grad_buf(*x)[s..s + rows * cols], g);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.dims(*logits).1;
                let buf = self.grad_buf(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g[r];
                    for j in 0..k {
                        buf[r * k + j] += gr * probs[r * k + j];
                    }
                    buf[r * k + t] -= gr;
                }
            }
            Op::SigmoidBce { logits, labels } => {
                let lv = self.value(*logits).to_vec();
                let buf = self.grad_buf(*logits);
                for ((dst, x), y) in buf.iter_mut().zip(lv).zip(labels) {
                    *dst += g[0] * (math::sigmoid(x) - y);
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                self.grad_buf(*x).iter_mut().for_each(|d| *d += s);
            }
            Op::Mean(x) => {
                let buf = self.grad_buf(*x);
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|d| *d += s);
            }
            Op::KlRatio { ce, ratios, active } => {
                let n = ratios.len() as f64;
                let buf = self.grad_buf(*ce);
                for ((dst, r), on) in buf.iter_mut().zip(ratios).zip(active) {
                    if *on {
                        *dst += g[0] * (r - 1.0) / n;
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn attention_backward(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: &[f64], g: &[f64]) {
        let (m, d) = self.dims(q);
        let n = self.dims(k).0;
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let qv = self.value(q).to_vec();
        let kv = self.value(k).to_vec();
        let vv = self.value(v).to_vec();
        let mut gq = vec![0.0; m * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..m {
                let p = &probs[(h * m + i) * n..(h * m + i) * n + n];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..n {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    weighted += p[j] * dp[j];
                    for (dst, x) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *dst += p[j] * x;
                    }
                }
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    for t in 0..dh {
                        gq[i * d + off + t] += ds * kv[j * d + off + t];
                        gk[j * d + off + t] += ds * qv[i * d + off + t];
                    }
                }
            }
        }
        add_into(self.grad_buf(q), &gq);
        add_into(self.grad_buf(k), &gk);
        add_into(self.grad_buf(v), &gv);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `-[y ln σ(x) + (1-y) ln(1-σ(x))]` via softplus.
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    math::softplus(x) - y * x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set_with(tag: SetTag, shape: Vec<usize>, data: Vec<f64>) -> ParamSet {
        let mut s = ParamSet::new(tag);
        s.add("p", Tensor::new(shape, data).unwrap());
        s
    }

    #[test]
    fn embed_lookup_permutes_identity_rows() {
        let set = set_with(1, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let t = g.param(&set, 0);
        let y = g.embed_lookup(t, &[1, 0]).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0, 1.0, 0.0]);
        assert!(g.embed_lookup(t, &[2]).is_err());
    }

    #[test]
    fn embed_lookup_repeated_index_sums_gradient() {
        let mut set = set_with(1, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let t = g.param(&set, 0);
        let y = g.embed_lookup(t, &[0, 0]).unwrap();
        assert_eq!(g.row(y, 0), g.row(y, 1));
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.accumulate_into(&mut set);
        assert_eq!(set.get(0).grad, vec![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let w = set_with(1, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = set_with(2, vec![1, 2], vec![0.5, -0.5]);
        let mut g = Graph::new();
        let (wn, bn) = (g.param(&w, 0), g.param(&b, 0));
        let zero_b = g.input(1, 2, vec![0.0, 0.0]).unwrap();
        let x = g.input(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.linear(x, wn, zero_b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let z = g.input(3, 2, vec![0.0; 6]).unwrap();
        let y = g.linear(z, wn, bn).unwrap();
        assert_eq!(g.value(y), &[0.5, -0.5, 0.5, -0.5, 0.5, -0.5]);
        let bad = g.input(1, 3, vec![0.0; 3]).unwrap();
        assert!(g.linear(bad, wn, bn).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let l = g.input(1, 4, vec![0.3; 4]).unwrap();
        let ce = g.cross_entropy(l, &[2]).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-15);
        let l = g.input(1, 4, vec![0.0, 50.0, 0.0, 0.0]).unwrap();
        let ce = g.cross_entropy(l, &[1]).unwrap();
        assert!(g.scalar(ce) < 1e-9 && g.scalar(ce) >= 0.0);
        let bad = g.input(1, 2, vec![f64::NAN, 0.0]);
        // Input rejects nothing about finiteness; cross_entropy must.
        let bad = bad.unwrap();
        assert!(matches!(g.cross_entropy(bad, &[0]), Err(Error::NonFinite(_))));
        assert!(g.cross_entropy(l, &[4]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let mut set = set_with(3, vec![1, 5], vec![0.1, -2.0, 0.7, 3.0, 0.0]);
        let mut g = Graph::new();
        let l = g.param(&set, 0);
        let ce = g.cross_entropy(l, &[3]).unwrap();
        let s = g.sum(ce);
        g.backward(s).unwrap();
        g.accumulate_into(&mut set);
        let total: f64 = set.get(0).grad.iter().sum();
        assert!(total.abs() < 1e-15);
        assert!(set.get(0).grad[3] < 0.0);
    }

    #[test]
    fn sigmoid_bce_reference_points() {
        let mut g = Graph::new();
        let x = g.input(1, 1, vec![0.0]).unwrap();
        let l = g.sigmoid_bce(x, &[1.0]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let x = g.input(1, 1, vec![30.0]).unwrap();
        let l = g.sigmoid_bce(x, &[1.0]).unwrap();
        assert!(g.scalar(l) < 1e-9);
    }

    #[test]
    fn attention_single_key_and_identical_keys() {
        let mut g = Graph::new();
        let q = g.input(1, 2, vec![3.0, -1.0]).unwrap();
        let k = g.input(1, 2, vec![0.2, 0.9]).unwrap();
        let v = g.input(1, 2, vec![5.0, 6.0]).unwrap();
        let o = g.attention_pool(q, k, v).unwrap();
        assert_eq!(g.value(o), &[5.0, 6.0]);
        let k = g.input(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let v = g.input(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let o = g.attention_pool(q, k, v).unwrap();
        let out = g.value(o);
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_gradient_and_shares_value() {
        let mut set = set_with(4, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let p = g.param(&set, 0);
        let d = g.stop_grad(p);
        assert_eq!(g.value(d), g.value(p));
        let s = g.sum(d);
        g.backward(s).unwrap();
        g.accumulate_into(&mut set);
        assert_eq!(set.grad_abs_sum(), 0.0);
    }

    #[test]
    fn accumulate_respects_tags() {
        let mut a = set_with(1, vec![1, 2], vec![1.0, 2.0]);
        let mut b = set_with(2, vec![1, 2], vec![3.0, 4.0]);
        let mut g = Graph::new();
        let pa = g.param(&a, 0);
        let _pb = g.param(&b, 0);
        let s = g.sum(pa);
        g.backward(s).unwrap();
        g.accumulate_into(&mut a);
        g.accumulate_into(&mut b);
        assert_eq!(a.get(0).grad, vec![1.0, 1.0]);
        assert_eq!(b.grad_abs_sum(), 0.0);
    }

    #[test]
    fn kl_ratio_is_zero_for_equal_models() {
        let mut g = Graph::new();
        let ce = g.input(3, 1, vec![0.5, 1.5, 2.0]).unwrap();
        let kl = g.kl_ratio(ce, &[-0.5, -1.5, -2.0]).unwrap();
        assert_eq!(g.scalar(kl), 0.0);
    }
}
