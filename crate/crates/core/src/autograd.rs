//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough cached state to run its backward rule. Parameters are
//! borrowed from a [`ParamStore`] and never copied onto the tape.

use std::collections::BTreeSet;

use crate::matrix::{gemm_into, Matrix};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Value<T> {
    Owned(Matrix<T>),
    Param(ParamId),
}

enum Op<T> {
    Input,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, bias: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix<T>> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix<T>, reduction: Reduction },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients for every parameter of a store, aligned with its ids.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub grads: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.grads.iter_mut().for_each(|g| g.scale_assign(s));
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::all_finite)
    }

    pub fn sq_norm(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter().map(|id| self.grads[id.0].sq_norm().to_f64_lossy()).sum()
    }
}

/// Strided 2-D view used to address per-head column blocks without copying.
#[derive(Clone, Copy)]
struct View<T> {
    ptr: *const T,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<T> View<T> {
    fn cols_of(m: &Matrix<T>, start: usize, width: usize) -> Self
    where
        T: Scalar,
    {
        assert!(start + width <= m.cols());
        // SAFETY: offset stays inside the allocation (checked above).
        let ptr = unsafe { m.data().as_ptr().add(start) };
        Self { ptr, rows: m.rows(), cols: width, rs: m.cols() as isize, cs: 1 }
    }

    fn t(self) -> Self {
        Self { ptr: self.ptr, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn whole(m: &Matrix<T>) -> Self
    where
        T: Scalar,
    {
        Self { ptr: m.data().as_ptr(), rows: m.rows(), cols: m.cols(), rs: m.cols() as isize, cs: 1 }
    }
}

/// `out[:, start..start+n] = alpha * a * b + beta * out[:, ...]`.
fn gemm_view<T: Scalar>(
    out: &mut Matrix<T>,
    out_start: usize,
    a: View<T>,
    b: View<T>,
    alpha: T,
    beta: T,
) {
    assert_eq!(a.cols, b.rows, "view gemm inner mismatch");
    assert_eq!(out.rows(), a.rows);
    assert!(out_start + b.cols <= out.cols());
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return;
    }
    let rsc = out.cols() as isize;
    // SAFETY: views are derived from live matrices distinct from `out`;
    // the output block is inside `out` (checked above).
    unsafe {
        let c = out.data_mut().as_mut_ptr().add(out_start);
        T::gemm(a.rows, a.cols, b.cols, alpha, a.ptr, a.rs, a.cs, b.ptr, b.rs, b.cs, beta, c, rsc, 1);
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => &self.store.get(*id).value,
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm_into(&mut out, av, false, bv, false, T::one(), T::zero());
        self.push(out, Op::MatMul { a, b, trans_b: false })
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm_into(&mut out, av, false, bv, true, T::one(), T::zero());
        self.push(out, Op::MatMul { a, b, trans_b: true })
    }

    /// `x * w + bias` with `bias` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        if let Some(b) = bias {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols()), "bias shape");
            for i in 0..out.rows() {
                out.row_mut(i).copy_from_slice(bv.row(0));
            }
            gemm_into(&mut out, xv, false, wv, false, T::one(), T::one());
        } else {
            gemm_into(&mut out, xv, false, wv, false, T::one(), T::zero());
        }
        self.push(out, Op::Linear { x, w, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let (n, d) = xv.shape();
        assert_eq!(gv.shape(), (1, d));
        assert_eq!(bv.shape(), (1, d));
        let dt = lit::<T>(d as f64);
        let eps = lit::<T>(eps);
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * gv.row(0)[j] + bv.row(0)[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q` (`Lq x d`), `k` and `v` (`Lk x d`). With `causal`, query `i`
    /// only attends to keys `j <= i + (Lk - Lq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), (lk, d));
        assert!(heads >= 1 && d % heads == 0, "hidden size must divide into heads");
        let dh = d / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let offset = lk as isize - lq as isize;
        let mut out = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = Matrix::zeros(lq, lk);
            let qh = View::cols_of(qv, h * dh, dh);
            let kh = View::cols_of(kv, h * dh, dh);
            gemm_view(&mut s, 0, qh, kh.t(), scale, T::zero());
            for i in 0..lq {
                let row = s.row_mut(i);
                let limit = if causal { (i as isize + offset + 1).clamp(0, lk as isize) as usize } else { lk };
                softmax_in_place(&mut row[..limit]);
                row[limit..].iter_mut().for_each(|x| *x = T::zero());
            }
            let vh = View::cols_of(vv, h * dh, dh);
            gemm_view(&mut out, h * dh, View::whole(&s), vh, T::one(), T::zero());
            probs.push(s);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&views);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = lit::<T>(xv.rows() as f64);
        let mut out = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(T::one() / n);
        self.push(out, Op::MeanRows(x))
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            assert!(t < row.len(), "target out of range");
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(row);
        }
        if reduction == Reduction::Mean && !targets.is_empty() {
            total /= lit(targets.len() as f64);
        }
        let out = Matrix::from_vec(1, 1, vec![total]);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, reduction })
    }

    /// Every parameter reachable backwards from `root`.
    pub fn reachable_params(&self, root: Var) -> BTreeSet<ParamId> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        let mut out = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            if let Value::Param(id) = self.nodes[v.0].value {
                out.insert(id);
            }
            stack.extend(self.inputs(v));
        }
        out
    }

    fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Input | Op::Param => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) => vec![*a, *b],
            Op::Linear { x, w, bias } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::MeanRows(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(parts) => parts.clone(),
            Op::GatherRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Backpropagate from the scalar `root`, adding parameter gradients
    /// into `grads`.
    pub fn backward(&self, root: Var, grads: &mut ParamGrads<T>) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut node_grads: Vec<Option<Matrix<T>>> = (0..=root.0).map(|_| None).collect();
        node_grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = node_grads[idx].take() else { continue };
            self.backward_node(Var(idx), g, &mut node_grads, grads);
        }
    }

    fn backward_node(
        &self,
        v: Var,
        g: Matrix<T>,
        acc: &mut [Option<Matrix<T>>],
        grads: &mut ParamGrads<T>,
    ) {
        fn accumulate<T: Scalar>(acc: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
            match &mut acc[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        fn slot<T: Scalar>(acc: &mut [Option<Matrix<T>>], v: Var, shape: (usize, usize)) -> &mut Matrix<T> {
            acc[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
        }

        let node = &self.nodes[v.0];
        match &node.op {
            Op::Input => {}
            Op::Param => {
                if let Value::Param(id) = node.value {
                    grads.grads[id.0].add_assign(&g);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(acc, *a, av.shape());
                // c = a * op(b): da = g * op(b)^T
                gemm_into(ga, &g, false, bv, !*trans_b, T::one(), T::one());
                let gb = slot(acc, *b, bv.shape());
                if *trans_b {
                    // c = a * b^T: db = g^T * a
                    gemm_into(gb, &g, true, av, false, T::one(), T::one());
                } else {
                    gemm_into(gb, av, true, &g, false, T::one(), T::one());
                }
            }
            Op::Linear { x, w, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let gx = slot(acc, *x, xv.shape());
                gemm_into(gx, &g, false, wv, true, T::one(), T::one());
                let gw = slot(acc, *w, wv.shape());
                gemm_into(gw, xv, true, &g, false, T::one(), T::one());
                if let Some(b) = bias {
                    let gb = slot(acc, *b, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(acc, *b, g.clone());
                accumulate(acc, *a, g);
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(acc, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut ga = g;
                for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                    if x <= T::zero() {
                        *o = T::zero();
                    }
                }
                accumulate(acc, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let (n, d) = xhat.shape();
                let dt = lit::<T>(d as f64);
                let mut dgain = Matrix::zeros(1, d);
                let mut dbias = Matrix::zeros(1, d);
                let mut dx = Matrix::zeros(n, d);
                let mut dxhat = vec![T::zero(); d];
                for i in 0..n {
                    let (gr, xh) = (g.row(i), xhat.row(i));
                    let mut sum1 = T::zero();
                    let mut sum2 = T::zero();
                    for j in 0..d {
                        dgain.row_mut(0)[j] += gr[j] * xh[j];
                        dbias.row_mut(0)[j] += gr[j];
                        dxhat[j] = gr[j] * gv.row(0)[j];
                        sum1 += dxhat[j];
                        sum2 += dxhat[j] * xh[j];
                    }
                    let (m1, m2) = (sum1 / dt, sum2 / dt);
                    let r = rstd[i];
                    let out = dx.row_mut(i);
                    for j in 0..d {
                        out[j] = r * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                accumulate(acc, *x, dx);
                accumulate(acc, *gain, dgain);
                accumulate(acc, *bias, dbias);
            }
            Op::Attention { q, k, v: vv_id, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*vv_id));
                let d = qv.cols();
                let dh = d / heads;
                let scale = lit::<T>(1.0 / (dh as f64).sqrt());
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(kv.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                for (h, p) in probs.iter().enumerate() {
                    let (lq, lk) = p.shape();
                    let gh = View::cols_of(&g, h * dh, dh);
                    // dP = dO_h * V_h^T
                    let mut dp = Matrix::zeros(lq, lk);
                    gemm_view(&mut dp, 0, gh, View::cols_of(vv, h * dh, dh).t(), T::one(), T::zero());
                    // dV_h = P^T * dO_h
                    gemm_view(&mut dv, h * dh, View::whole(p).t(), gh, T::one(), T::zero());
                    // dS = P .* (dP - rowsum(dP .* P))
                    for i in 0..lq {
                        let pr = p.row(i);
                        let dr = dp.row_mut(i);
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..lk {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    gemm_view(&mut dq, h * dh, View::whole(&dp), View::cols_of(kv, h * dh, dh), scale, T::zero());
                    gemm_view(&mut dk, h * dh, View::whole(&dp).t(), View::cols_of(qv, h * dh, dh), scale, T::zero());
                }
                accumulate(acc, *q, dq);
                accumulate(acc, *k, dk);
                accumulate(acc, *vv_id, dv);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let gt = slot(acc, *table, tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    accumulate(acc, p, g.select_rows(&idx));
                    start += rows;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let gx = slot(acc, *x, xv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = lit::<T>(xv.rows() as f64);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v / n;
                    }
                }
                accumulate(acc, *x, gx);
            }
            Op::CrossEntropy { logits, targets, probs, reduction } => {
                let mut upstream = g[(0, 0)];
                if *reduction == Reduction::Mean && !targets.is_empty() {
                    upstream /= lit(targets.len() as f64);
                }
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl.row_mut(i)[t] -= T::one();
                }
                gl.scale_assign(upstream);
                accumulate(acc, *logits, gl);
            }
        }
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against backprop for every parameter entry.
    fn check<F>(store: &mut ParamStore<f64>, build: F)
    where
        F: Fn(&mut Graph<'_, f64>) -> Var,
    {
        let mut grads = ParamGrads::zeros_like(store);
        {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss, &mut grads);
        }
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let h = 1e-6;
        for id in ids {
            let n = store.get(id).value.len();
            for e in 0..n {
                let orig = store.get(id).value.data()[e];
                store.get_mut(id).value.data_mut()[e] = orig + h;
                let plus = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).value.data_mut()[e] = orig - h;
                let minus = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).value.data_mut()[e] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let bp = grads.get(id).data()[e];
                let err = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-4);
                assert!(err < 1e-5, "param {} entry {e}: fd {fd} bp {bp}", store.get(id).name);
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        for &(name, r, c) in shapes {
            store.add(name, ParamGroup::Encoder, Matrix::random_uniform(r, c, 1.0, &mut rng));
        }
        store
    }

    #[test]
    fn linear_relu_cross_entropy_gradients() {
        let mut store = store_with(&[("x", 3, 4), ("w", 4, 5), ("b", 1, 5)]);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        check(&mut store, |g| {
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let b = g.param(ids[2]);
            let h = g.linear(x, w, Some(b));
            let h = g.relu(h);
            g.cross_entropy(h, &[0, 4, 2], Reduction::Sum)
        });
    }

    #[test]
    fn layer_norm_and_attention_gradients() {
        let mut store = store_with(&[("q", 3, 8), ("k", 5, 8), ("v", 5, 8), ("g", 1, 8), ("b", 1, 8), ("o", 8, 4)]);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for causal in [false, true] {
            check(&mut store, |g| {
                let q = g.param(ids[0]);
                let k = g.param(ids[1]);
                let v = g.param(ids[2]);
                let a = g.attention(q, k, v, 2, causal);
                let ln = {
                    let (gn, bn) = (g.param(ids[3]), g.param(ids[4]));
                    g.layer_norm(a, gn, bn, 1e-5)
                };
                let o = g.param(ids[5]);
                let logits = g.matmul(ln, o);
                g.cross_entropy(logits, &[1, 0, 3], Reduction::Mean)
            });
        }
    }

    #[test]
    fn gather_concat_embedding_mean_gradients() {
        let mut store = store_with(&[("table", 6, 4), ("w", 4, 3), ("u", 2, 4)]);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        check(&mut store, |g| {
            let t = g.param(ids[0]);
            let e = g.embedding(t, &[1, 3, 3, 5]);
            let u = g.param(ids[2]);
            let c = g.concat_rows(&[e, u]);
            let s = g.gather_rows(c, &[0, 4, 5, 2]);
            let m = g.mean_rows(s);
            let sc = g.matmul_t(m, s);
            let w = g.param(ids[1]);
            let l = g.matmul(s, w);
            let l = g.add(l, l);
            let l = g.scale(l, 0.5);
            let a = g.cross_entropy(l, &[0, 1, 2, 0], Reduction::Sum);
            let sc = g.scale(sc, 0.3);
            let b = g.cross_entropy(sc, &[2], Reduction::Sum);
            g.add(a, b)
        });
    }

    #[test]
    fn causal_attention_masks_future_keys() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.add("x", ParamGroup::Encoder, Matrix::random_uniform(4, 4, 1.0, &mut rng));
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let a = g.attention(x, x, x, 1, true);
        // first query sees only the first key, so it copies the first value row
        assert!(g.value(a).row(0).iter().zip(store.get(id).value.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_vocab() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Matrix::zeros(3, 7));
        let l = g.cross_entropy(logits, &[0, 3, 6], Reduction::Sum);
        assert!((g.scalar(l) - 3.0 * 7f64.ln()).abs() < 1e-12);
    }
}
