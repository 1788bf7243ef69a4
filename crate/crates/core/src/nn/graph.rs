//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and never copied; [`Graph::backward`] pushes an
//! output adjoint through the tape and accumulates parameter gradients into a
//! [`Grads`] buffer.

use std::collections::HashMap;

use super::mat::{gemm, Mat};
use super::params::{Grads, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    MaxPoolGroups { x: Var, argmax: Vec<usize> },
    WeightedRowSum { x: Var, weights: Vec<f64> },
    BroadcastRows(Var),
}

struct Node {
    value: Value,
    op: Op,
    /// Whether any parameter lies upstream, so backward can skip dead branches.
    grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::MaskedSoftmax(a) | Op::BroadcastRows(a) => {
                self.needs(*a)
            }
            Op::LayerNorm { x, gain, bias, .. } => self.needs(*x) || self.needs(*gain) || self.needs(*bias),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(|p| self.needs(*p)),
            Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::MaxPoolGroups { x, .. }
            | Op::WeightedRowSum { x, .. } => self.needs(*x),
        };
        self.nodes.push(Node { value: Value::Owned(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient flows out of the graph through it).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        let cols = out.cols();
        let rv = r.data().to_vec();
        for chunk in out.data_mut().chunks_exact_mut(cols) {
            chunk.iter_mut().zip(&rv).for_each(|(o, b)| *o += b);
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with learned `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        assert_eq!(g.len(), cols, "layer norm gain width");
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax where columns with `mask[c] == false` get exactly zero weight.
    ///
    /// Panics if every column is masked; callers validate masks first.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), cols, "mask length must equal key count");
            assert!(m.iter().any(|b| *b), "softmax over a fully masked row");
        }
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let max = (0..cols).filter(|c| keep(*c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out.set(r, c, e);
                    sum += e;
                }
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice out of range");
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(index.len(), xv.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows { x, index: index.to_vec() })
    }

    /// Max over consecutive blocks of `group` rows; ties resolve to the first row.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(group > 0 && rows % group == 0, "rows must divide into groups");
        let groups = rows / group;
        let mut out = Mat::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for gi in 0..groups {
            for c in 0..cols {
                let mut best = gi * group;
                let mut best_v = xv.get(best, c);
                for r in gi * group + 1..(gi + 1) * group {
                    let v = xv.get(r, c);
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                out.set(gi, c, best_v);
                argmax[gi * cols + c] = best;
            }
        }
        self.push(out, Op::MaxPoolGroups { x, argmax })
    }

    /// `1 × c` weighted sum of rows; `weights.len()` must equal the row count.
    pub fn weighted_row_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(weights.len(), xv.rows(), "one weight per row");
        let mut out = Mat::zeros(1, xv.cols());
        for (r, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                out.data_mut().iter_mut().zip(xv.row(r)).for_each(|(o, v)| *o += w * v);
            }
        }
        self.push(out, Op::WeightedRowSum { x, weights: weights.to_vec() })
    }

    /// Mean over rows whose mask entry is true (all rows when `mask` is `None`).
    pub fn masked_mean_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let rows = self.value(x).rows();
        let weights: Vec<f64> = match mask {
            Some(m) => {
                let n = m.iter().filter(|b| **b).count().max(1) as f64;
                m.iter().map(|b| if *b { 1.0 / n } else { 0.0 }).collect()
            }
            None => vec![1.0 / rows as f64; rows],
        };
        self.weighted_row_sum(x, &weights)
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "broadcast expects a row vector");
        let mut data = Vec::with_capacity(n * xv.cols());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let cols = xv.cols();
        self.push(Mat::from_vec(n, cols, data), Op::BroadcastRows(x))
    }

    /// Back-propagates `seed` (the adjoint of `output`), adding `scale ×` the
    /// parameter gradients into `grads`.
    pub fn backward(&self, output: Var, seed: Mat, grads: &mut Grads, scale: f64) {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut adj: Vec<Option<Mat>> = Vec::with_capacity(output.0 + 1);
        adj.resize_with(output.0 + 1, || None);
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].grad;
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &g, scale),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if needs(a) {
                        let mut ga = Mat::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, true, &mut ga, 0.0);
                        accumulate(&self.nodes, &mut adj, *a, ga);
                    }
                    if needs(b) {
                        let mut gb = Mat::zeros(bv.rows(), bv.cols());
                        gemm(av, true, &g, false, &mut gb, 0.0);
                        accumulate(&self.nodes, &mut adj, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if needs(a) {
                        let mut ga = Mat::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, false, &mut ga, 0.0);
                        accumulate(&self.nodes, &mut adj, *a, ga);
                    }
                    if needs(b) {
                        let mut gb = Mat::zeros(bv.rows(), bv.cols());
                        gemm(&g, true, av, false, &mut gb, 0.0);
                        accumulate(&self.nodes, &mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => match (needs(a), needs(b)) {
                    (true, true) => {
                        accumulate(&self.nodes, &mut adj, *b, g.clone());
                        accumulate(&self.nodes, &mut adj, *a, g);
                    }
                    (true, false) => accumulate(&self.nodes, &mut adj, *a, g),
                    (false, _) => accumulate(&self.nodes, &mut adj, *b, g),
                },
                Op::AddRow(a, row) => {
                    if needs(row) {
                        accumulate(&self.nodes, &mut adj, *row, g.sum_rows());
                    }
                    accumulate(&self.nodes, &mut adj, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_in_place(*s);
                    accumulate(&self.nodes, &mut adj, *a, g);
                }
                Op::Relu(a) => {
                    let out = self.value(Var(i));
                    let mut g = g;
                    g.data_mut().iter_mut().zip(out.data()).for_each(|(d, y)| {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&self.nodes, &mut adj, *a, g);
                }
                Op::Sigmoid(a) => {
                    let out = self.value(Var(i));
                    let mut g = g;
                    g.data_mut().iter_mut().zip(out.data()).for_each(|(d, y)| *d *= y * (1.0 - y));
                    accumulate(&self.nodes, &mut adj, *a, g);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain).data();
                    let (rows, cols) = xhat.shape();
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dgain = Mat::zeros(1, cols);
                    let dbias = g.sum_rows();
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                            dgain.data_mut()[c] += gr[c] * hr[c];
                        }
                        let n = cols as f64;
                        let k = inv_std[r] / n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            out[c] = k * (n * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                    accumulate(&self.nodes, &mut adj, *x, dx);
                    accumulate(&self.nodes, &mut adj, *gain, dgain);
                    accumulate(&self.nodes, &mut adj, *bias, dbias);
                }
                Op::MaskedSoftmax(x) => {
                    let y = self.value(Var(i));
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&self.nodes, &mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if !needs(p) {
                            offset += w;
                            continue;
                        }
                        let mut gp = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&self.nodes, &mut adj, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let cols = g.cols();
                    for p in parts {
                        let h = self.value(*p).rows();
                        let gp = Mat::from_vec(h, cols, g.data()[offset * cols..(offset + h) * cols].to_vec());
                        offset += h;
                        accumulate(&self.nodes, &mut adj, *p, gp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&self.nodes, &mut adj, *x, gx);
                }
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (r, &src) in index.iter().enumerate() {
                        gx.row_mut(src).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                    }
                    accumulate(&self.nodes, &mut adj, *x, gx);
                }
                Op::MaxPoolGroups { x, argmax } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    let cols = g.cols();
                    for gi in 0..g.rows() {
                        for c in 0..cols {
                            let src = argmax[gi * cols + c];
                            let cur = gx.get(src, c);
                            gx.set(src, c, cur + g.get(gi, c));
                        }
                    }
                    accumulate(&self.nodes, &mut adj, *x, gx);
                }
                Op::WeightedRowSum { x, weights } => {
                    let mut gx = Mat::zeros(weights.len(), g.cols());
                    for (r, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            gx.row_mut(r).iter_mut().zip(g.data()).for_each(|(o, v)| *o = w * v);
                        }
                    }
                    accumulate(&self.nodes, &mut adj, *x, gx);
                }
                Op::BroadcastRows(x) => accumulate(&self.nodes, &mut adj, *x, g.sum_rows()),
            }
        }
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Mat>], v: Var, g: Mat) {
    if !nodes[v.0].grad {
        return;
    }
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Scalar loss = Σ out ⊙ probe, so the seed is `probe` itself.
    fn check<F>(store: &mut ParamStore, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (probe, analytic) = {
            let mut g = Graph::new(store);
            let out = build(&mut g);
            let shape = g.value(out).shape();
            let probe = random_mat(&mut rng, shape.0, shape.1);
            let mut grads = store.zero_grads();
            g.backward(out, probe.clone(), &mut grads, 1.0);
            (probe, grads)
        };
        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let out = build(&mut g);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let up = loss(store);
                store.get_mut(id).data_mut()[k] = orig - eps;
                let down = loss(store);
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic.get(id).data()[k];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{} [{k}]: fd {fd} vs analytic {an}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn gradients_of_every_op_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.insert("a", random_mat(&mut rng, 4, 3));
        let b = store.insert("b", random_mat(&mut rng, 3, 5));
        let c = store.insert("c", random_mat(&mut rng, 6, 3));
        let bias = store.insert("bias", random_mat(&mut rng, 1, 5));
        let gain = store.insert("gain", random_mat(&mut rng, 1, 5));
        let beta = store.insert("beta", random_mat(&mut rng, 1, 5));
        let mask = [true, false, true, true, true, false];
        check(&mut store, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let c = g.param(c);
            let ab = g.matmul(a, b);
            let bias = g.param(bias);
            let ab = g.add_row(ab, bias);
            let ln = {
                let gain = g.param(gain);
                let beta = g.param(beta);
                g.layer_norm(ab, gain, beta)
            };
            let r = g.relu(ln);
            let s = g.sigmoid(ab);
            let sum = g.add(r, s);
            let logits = g.matmul_nt(a, c);
            let logits = g.scale(logits, 0.7);
            let w = g.masked_softmax(logits, Some(&mask));
            let wc = g.matmul(w, c);
            let cat = g.concat_cols(&[sum, wc]);
            let sl = g.slice_cols(cat, 2, 5);
            let gathered = g.gather_rows(sl, &[0, 2, 2, 3, 1, 0]);
            let pooled = g.max_pool_groups(gathered, 2);
            let mean = g.masked_mean_rows(pooled, Some(&[true, false, true]));
            let bc = g.broadcast_rows(mean, 2);
            g.concat_rows(&[pooled, bc])
        });
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_with_zero_masked_weight() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::from_vec(2, 3, vec![1.0, 50.0, -2.0, 0.0, 0.0, 0.0]));
        let y = g.masked_softmax(x, Some(&[true, false, true]));
        let y = g.value(y);
        for r in 0..2 {
            assert_eq!(y.get(r, 1), 0.0);
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((y.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert!(sigmoid(800.0) <= 1.0);
    }
}
