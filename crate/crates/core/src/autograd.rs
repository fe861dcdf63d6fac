//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape in reverse. Trainable tensors live
//! in a [`ParamSet`]; a graph reads them through [`Graph::param`] and the
//! gradients come back keyed by parameter so that one graph can span several
//! models (the retriever and the generator share one joint loss).
//!
//! Everything is two-dimensional; vectors are `1 x n` rows.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, Axis};

static NEXT_SET_TAG: AtomicU64 = AtomicU64::new(1);

/// Named trainable tensors with a process-unique tag.
#[derive(Debug)]
pub struct ParamSet {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            tag: NEXT_SET_TAG.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tag: NEXT_SET_TAG.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Scalar `k` in flattened (tensor, row-major) order.
    pub fn scalar_location(&self, mut k: usize) -> (usize, usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return (i, k / t.ncols(), k % t.ncols());
            }
            k -= t.len();
        }
        panic!("scalar index out of range");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Softmax(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    KlToSoftmax {
        scores: Var,
        target: Vec<f64>,
        tau: f64,
        q: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients keyed by `(parameter set, parameter id)`.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<(u64, usize), Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, set: &ParamSet, id: usize) -> Option<&Array2<f64>> {
        self.by_param.get(&(set.tag, id))
    }

    /// One entry per tensor of `set`, zero-filled where no gradient flowed.
    pub fn dense_for(&self, set: &ParamSet) -> Vec<Array2<f64>> {
        (0..set.len())
            .map(|i| {
                self.get(set, i)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(set.get(i).raw_dim()))
            })
            .collect()
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a trainable tensor; repeated reads share one node.
    pub fn param(&mut self, set: &ParamSet, id: usize) -> Var {
        let key = (set.tag, id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(set.tensors[id].clone(), Op::Param);
        self.params.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a + c` for a constant `c` (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std[r] = is;
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Mean over rows, giving a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    /// Summed token cross-entropy `Σ_r (logsumexp(row_r) − row_r[target_r])`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// `KL(target ‖ softmax(scores / tau))` for a `1 x K` score row; the
    /// target distribution is a constant.
    pub fn kl_to_softmax(&mut self, scores: Var, target: &[f64], tau: f64) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.len(), target.len());
        let scaled: Vec<f64> = sv.iter().map(|s| s / tau).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut loss = 0.0;
        for (p, s) in target.iter().zip(&scaled) {
            if *p > 0.0 {
                loss += p * (p.ln() - (s - lse));
            }
        }
        let q = scaled.iter().map(|s| (s - lse).exp()).collect();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::KlToSoftmax {
                scores,
                target: target.to_vec(),
                tau,
                q,
            },
        )
    }

    /// Backpropagates from a `1 x 1` node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gamma);
                    let ncols = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let d = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_d = d.sum() / ncols;
                        let mean_dx = d.dot(&xh) / ncols;
                        let is = inv_std[r];
                        for c in 0..dxhat.ncols() {
                            dx[[r, c]] = is * (d[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |d, &yv| *d -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let ga = g.broadcast((rows, g.ncols())).expect("row broadcast").to_owned() / rows as f64;
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + c]).to_owned());
                        start += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let up = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0;
                    }
                    acc(&mut grads, *logits, gl * up);
                }
                Op::KlToSoftmax { scores, target, tau, q } => {
                    let up = g[[0, 0]];
                    let gs: Vec<f64> = q.iter().zip(target).map(|(q, p)| up * (q - p) / tau).collect();
                    let shape = self.value(*scores).raw_dim();
                    acc(
                        &mut grads,
                        *scores,
                        Array2::from_shape_vec(shape, gs).expect("score shape"),
                    );
                }
            }
        }

        let mut by_param = HashMap::with_capacity(self.params.len());
        for (key, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                by_param.insert(*key, g);
            }
        }
        Gradients { by_param }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every scalar of
    /// parameter `id`, compared to the analytic gradient.
    fn check(set: &mut ParamSet, id: usize, f: impl Fn(&mut Graph, &ParamSet) -> Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, set);
        let analytic = g.backward(loss).dense_for(set)[id].clone();
        let h = 1e-5;
        let shape = set.get(id).raw_dim();
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                let orig = set.get(id)[[r, c]];
                set.get_mut(id)[[r, c]] = orig + h;
                let mut g1 = Graph::new();
                let l1 = f(&mut g1, set);
                let up = g1.scalar(l1);
                set.get_mut(id)[[r, c]] = orig - h;
                let mut g2 = Graph::new();
                let l2 = f(&mut g2, set);
                let down = g2.scalar(l2);
                set.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "param {id} [{r},{c}]: analytic {a} numeric {numeric}");
            }
        }
    }

    fn sample_set() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("a", array![[0.3, -0.2, 0.5], [0.1, 0.7, -0.4]]);
        ps.add("b", array![[0.2, -0.6], [0.9, 0.1], [-0.3, 0.4]]);
        ps.add("gamma", array![[1.1, 0.8, -0.5]]);
        ps.add("beta", array![[0.05, -0.1, 0.2]]);
        ps.add(
            "table",
            array![[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6], [0.7, -0.8, 0.9], [0.3, 0.3, -0.1]],
        );
        ps
    }

    fn composite(g: &mut Graph, ps: &ParamSet) -> Var {
        let a = g.param(ps, 0);
        let b = g.param(ps, 1);
        let gamma = g.param(ps, 2);
        let beta = g.param(ps, 3);
        let table = g.param(ps, 4);
        let e = g.gather(table, &[2, 0, 2]);
        let ln = g.layer_norm(e, gamma, beta);
        let act = g.gelu(ln);
        let h = g.matmul(act, b); // 3x2
        let sm = g.softmax_rows(h);
        let att = g.matmul(sm, a); // 3x3
        let att_t = g.matmul_t(sm, b); // 3x3
        let both = g.add(att, att_t);
        let left = g.slice_cols(both, 0, 1);
        let right = g.slice_cols(both, 1, 1);
        let cat = g.concat_cols(&[right, left]);
        let rows = g.concat_rows(&[cat, h]);
        let scaled = g.scale(rows, 1.7);
        let prod = g.mul(scaled, rows);
        let pooled = g.mean_rows(prod);
        let bias = g.slice_cols(beta, 0, 2);
        let shifted = g.add_row(prod, bias);
        let ce = g.cross_entropy_sum(shifted, &[0, 1, 1, 0, 1, 0]);
        let kl = g.kl_to_softmax(pooled, &[0.8, 0.2], 0.7);
        g.add(ce, kl)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut ps = sample_set();
        for id in 0..ps.len() {
            check(&mut ps, id, composite);
        }
    }

    #[test]
    fn shared_param_reads_accumulate() {
        let mut ps = ParamSet::new();
        ps.add("w", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(&ps, 0);
        let b = g.param(&ps, 0);
        assert_eq!(a, b);
        let sq = g.mul(a, b);
        let grads = g.backward(sq);
        assert_eq!(grads.get(&ps, 0).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn kl_is_zero_when_distributions_match() {
        let mut g = Graph::new();
        let s = g.constant(array![[0.3, -1.0, 2.0]]);
        let q = softmax(&[0.3 / 0.8, -1.0 / 0.8, 2.0 / 0.8]);
        let kl = g.kl_to_softmax(s, &q, 0.8);
        assert!(g.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_with_masking() {
        let x = array![[1.0, f64::NEG_INFINITY, 3.0], [1000.0, 999.0, -5.0]];
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(y[[0, 1]], 0.0);
    }

    #[test]
    fn cloned_sets_get_fresh_tags() {
        let ps = sample_set();
        let copy = ps.clone();
        assert_ne!(ps.tag, copy.tag);
        assert_eq!(ps, copy);
    }
}
