//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter through
//! [`Graph::param`] and come back out of [`Graph::backward`] keyed by name;
//! constants (inputs, frozen weights) never receive gradients. Gradients of a
//! node that fans out into several consumers accumulate by summation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_grad, log_sum_exp, matmul_at_into, matmul_bt_into, matmul_into, normalize_row,
    softmax_in_place, Tensor,
};

/// Named trainable tensors, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    Assemble { src: Var, fill: Var, slots: Vec<Option<usize>> },
    ConcatCols(Var, Var),
    MeanRows(Var),
    Sum(Var),
    SumAbs(Var),
    SumSquares(Var),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Gradients of a scalar with respect to every parameter registered on the graph.
pub type Gradients = ParamStore;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers (once) and returns the trainable leaf for `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.expect(name)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// A parameter tensor read without tracking gradients (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.constant(store.expect(name)?.clone()))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let vals = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vals, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let vals = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vals, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let vals = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vals, Op::Mul(a, b), rg))
    }

    /// `x[n × d] + b[d]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(b).len() != d {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).values().to_vec();
        if d > 0 {
            for row in out.values_mut().chunks_mut(d) {
                for (o, bb) in row.iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.values_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.values_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm over {:?} with gamma {:?}",
                self.value(x).shape(),
                self.value(gamma).shape()
            )));
        }
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        {
            let xv = self.value(x).values();
            let g = self.value(gamma).values();
            let b = self.value(beta).values();
            for i in 0..n {
                let (h, s) = normalize_row(&xv[i * d..(i + 1) * d], eps);
                for j in 0..d {
                    out[i * d + j] = h[j] * g[j] + b[j];
                }
                xhat.extend(h);
                inv_std.push(s);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q[nq × d]`, `k[nk × d]`, `v[nk × d]`. With no keys the output is zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.dims2(q);
        let (nk, dk) = self.dims2(k);
        let (nv, dv) = self.dims2(v);
        if dk != d || dv != d || nv != nk || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention with q {:?}, k {:?}, v {:?}, {heads} heads",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        if nk > 0 {
            let qv = self.value(q).values();
            let kv = self.value(k).values();
            let vv = self.value(v).values();
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
                for i in 0..nq {
                    let qi = &qv[i * d + off..i * d + off + dh];
                    let row = &mut p[i * nk..(i + 1) * nk];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kv[j * d + off..j * d + off + dh];
                        *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for (j, &w) in row.iter().enumerate() {
                        let vj = &vv[j * d + off..j * d + off + dh];
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo += w * vvv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(vec![nq, d], out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("row index {bad} out of range for {n} rows")));
        }
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![idx.len(), d], out)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Builds `[slots.len() × d]`: slot `i` copies `src` row `slots[i]`, or
    /// the `fill` vector when `slots[i]` is `None`.
    pub fn assemble(&mut self, src: Var, fill: Var, slots: &[Option<usize>]) -> Result<Var> {
        let (n, d) = self.dims2(src);
        if self.value(fill).len() != d {
            return Err(Error::Dimension("assemble fill width mismatch".into()));
        }
        let s = self.value(src).values();
        let f = self.value(fill).values();
        let mut out = Vec::with_capacity(slots.len() * d);
        for slot in slots {
            match *slot {
                Some(i) if i < n => out.extend_from_slice(&s[i * d..(i + 1) * d]),
                Some(i) => {
                    return Err(Error::Contract(format!(
                        "slot refers to row {i} of a {n}-row source"
                    )))
                }
                None => out.extend_from_slice(f),
            }
        }
        let rg = self.rg(src) || self.rg(fill);
        Ok(self.push(
            Tensor::new(vec![slots.len(), d], out)?,
            Op::Assemble { src, fill, slots: slots.to_vec() },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.dims2(a);
        let (n2, db) = self.dims2(b);
        if n != n2 {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&av[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, da + db], out)?, Op::ConcatCols(a, b), rg))
    }

    /// Column means as a `[1 × d]` row; the zero row when there are no rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims2(x);
        let mut out = vec![0.0; d];
        if n > 0 {
            for row in self.value(x).values().chunks(d) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![1, d], out).expect("row shape"), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAbs(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// `Σ wᵢ·xᵢ` over scalars, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.value(v).item()?;
        }
        let rg = terms.iter().any(|&(v, w)| w != 0.0 && self.rg(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; zero with no rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits);
        if n != targets.len() {
            return Err(Error::Contract(format!(
                "{} logit rows for {} targets",
                n,
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target id {t} outside vocabulary of {c}")));
        }
        let lv = self.value(logits).values();
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.extend(p);
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = n > 0 && self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// `x · w + b` for `x[n × i]`, `w[i × o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Gradient of the scalar `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = ParamStore::new();
        for (name, v) in &self.param_order {
            let shape = self.value(*v).shape().to_vec();
            let t = match grads[v.0].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let ga = acc(grads, *a, m * k);
                    matmul_bt_into(g, self.value(*b).values(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, k * n);
                    matmul_at_into(self.value(*a).values(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.rg(v) {
                        add_scaled(acc(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.rg(v) {
                        add_scaled(acc(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    add_scaled(acc(grads, *x, g.len()), g, 1.0);
                }
                if self.rg(*b) {
                    let d = self.value(*b).len();
                    let gb = acc(grads, *b, d);
                    if d > 0 {
                        for row in g.chunks(d) {
                            add_scaled(gb, row, 1.0);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((o, gg), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gg * y;
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((o, gg), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gg * x;
                    }
                }
            }
            Op::Scale(x, c) => add_scaled(acc(grads, *x, g.len()), g, *c),
            Op::Gelu(x) => {
                let xv = self.value(*x).values();
                let gx = acc(grads, *x, g.len());
                for ((o, gg), v) in gx.iter_mut().zip(g).zip(xv) {
                    *o += gg * gelu_grad(*v);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = self.dims2(*x);
                let gam = self.value(*gamma).values();
                if self.rg(*gamma) {
                    let gg = acc(grads, *gamma, d);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = acc(grads, *beta, d);
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, n * d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let h = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += inv_std[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = self.dims2(*x);
                let gx = acc(grads, *x, n * d);
                for (r, &i) in idx.iter().enumerate() {
                    add_scaled(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                }
            }
            Op::Assemble { src, fill, slots } => {
                let (n, d) = self.dims2(*src);
                if self.rg(*src) {
                    let gs = acc(grads, *src, n * d);
                    for (r, slot) in slots.iter().enumerate() {
                        if let Some(i) = slot {
                            add_scaled(&mut gs[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
                if self.rg(*fill) {
                    let gf = acc(grads, *fill, d);
                    for (r, slot) in slots.iter().enumerate() {
                        if slot.is_none() {
                            add_scaled(gf, &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = self.dims2(*a);
                let db = self.value(*b).cols();
                let w = da + db;
                if self.rg(*a) {
                    let ga = acc(grads, *a, n * da);
                    for i in 0..n {
                        add_scaled(&mut ga[i * da..(i + 1) * da], &g[i * w..i * w + da], 1.0);
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, n * db);
                    for i in 0..n {
                        add_scaled(&mut gb[i * db..(i + 1) * db], &g[i * w + da..(i + 1) * w], 1.0);
                    }
                }
            }
            Op::MeanRows(x) => {
                let (n, d) = self.dims2(*x);
                if n > 0 {
                    let gx = acc(grads, *x, n * d);
                    let inv = 1.0 / n as f64;
                    for row in gx.chunks_mut(d) {
                        add_scaled(row, g, inv);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = acc(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::SumAbs(x) => {
                let xv = self.value(*x).values();
                let gx = acc(grads, *x, xv.len());
                for (o, v) in gx.iter_mut().zip(xv) {
                    *o += g[0] * sign(*v);
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).values();
                let gx = acc(grads, *x, xv.len());
                for (o, v) in gx.iter_mut().zip(xv) {
                    *o += 2.0 * g[0] * v;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if w != 0.0 && self.rg(v) {
                        acc(grads, v, 1)[0] += g[0] * w;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (n, c) = self.dims2(*logits);
                let gl = acc(grads, *logits, n * c);
                let inv = g[0] / n as f64;
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * c + j] += inv * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = self.dims2(q);
        let nk = self.value(k).rows();
        if nk == 0 || nq == 0 {
            return;
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).values();
        let kv = self.value(k).values();
        let vv = self.value(v).values();
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            for i in 0..nq {
                let go = &g[i * d + off..i * d + off + dh];
                let prow = &p[i * nk..(i + 1) * nk];
                for j in 0..nk {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let w = prow[j];
                    if w != 0.0 {
                        for (o, gg) in gv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                            *o += w * gg;
                        }
                    }
                }
                let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let qi = &qv[i * d + off..i * d + off + dh];
                    for t in 0..dh {
                        gq[i * d + off + t] += ds * kj[t];
                        gk[j * d + off + t] += ds * qi[t];
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(var) {
                let len = local.len();
                add_scaled(acc(grads, var, len), &local, 1.0);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let vals = a.values().iter().zip(b.values()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), vals).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, max_relative_error};

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        entries
            .iter()
            .map(|(n, s, v)| (n.to_string(), Tensor::new(s.clone(), v.clone()).unwrap()))
            .collect()
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let vals = (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        Tensor::new(shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let ps = store(&[("theta", vec![3], vec![0.5, -1.0, 2.0])]);
        let mut g = Graph::new();
        let t = g.param(&ps, "theta").unwrap();
        let s = g.sum(t);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("theta").unwrap().values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let ps = store(&[("theta", vec![2], vec![1.0, -2.0])]);
        let mut g = Graph::new();
        let t = g.param(&ps, "theta").unwrap();
        let s = g.sum_squares(t);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("theta").unwrap().values(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let ps = store(&[("theta", vec![2], vec![1.0, -2.0])]);
        let mut g = Graph::new();
        let t = g.param(&ps, "theta").unwrap();
        assert!(matches!(g.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let ps = store(&[("a", vec![2], vec![1.0, 2.0]), ("b", vec![2], vec![3.0, 4.0])]);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        g.param(&ps, "b").unwrap();
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("b").unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let ps = store(&[("x", vec![1], vec![3.0])]);
        let mut g = Graph::new();
        let x = g.param(&ps, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().values(), &[7.0]);
    }

    /// A composite touching every op, checked against central differences.
    fn composite(ps: &ParamStore) -> (Graph, Var) {
        let mut g = Graph::new();
        let x = g.param(ps, "x").unwrap();
        let w = g.param(ps, "w").unwrap();
        let b = g.param(ps, "b").unwrap();
        let gamma = g.param(ps, "gamma").unwrap();
        let beta = g.param(ps, "beta").unwrap();
        let fill = g.param(ps, "fill").unwrap();
        let h = g.linear(x, w, b).unwrap();
        let h = g.layer_norm(h, gamma, beta, 1e-5).unwrap();
        let h = g.gelu(h);
        let att = g.attention(h, h, h, 2).unwrap();
        let sel = g.gather_rows(att, &[2, 0]).unwrap();
        let grid = g.assemble(sel, fill, &[Some(1), None, Some(0), None]).unwrap();
        let cat = g.concat_cols(grid, grid).unwrap();
        let pooled = g.mean_rows(cat);
        let diff = g.sub(pooled, pooled).unwrap();
        let zero = g.sum_squares(diff);
        let sq = g.sum_squares(pooled);
        let ab = g.sum_abs(pooled);
        let prod = g.mul(grid, grid).unwrap();
        let scaled = g.scale(prod, 0.3);
        let s = g.sum(scaled);
        let ce = g.cross_entropy(cat, &[0, 3, 5, 7]).unwrap();
        let total = g.weighted_sum(&[(sq, 1.0), (ab, 0.5), (s, 0.2), (ce, 1.3), (zero, 1.0)]).unwrap();
        (g, total)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let ps: ParamStore = [
            ("x".to_string(), ramp(&[3, 5], 0.7)),
            ("w".to_string(), ramp(&[5, 4], 1.3)),
            ("b".to_string(), ramp(&[4], 2.1)),
            ("gamma".to_string(), ramp(&[4], 0.4)),
            ("beta".to_string(), ramp(&[4], 0.9)),
            ("fill".to_string(), ramp(&[4], 1.7)),
        ]
        .into_iter()
        .collect();
        let (g, loss) = composite(&ps);
        let analytic = g.backward(loss).unwrap();
        let f = |p: &ParamStore| {
            let (g, l) = composite(p);
            g.value(l).item().unwrap()
        };
        let numeric = fd_gradient(f, &ps, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn attention_with_no_keys_is_zero() {
        let mut g = Graph::new();
        let q = g.constant(ramp(&[3, 4], 0.3));
        let k = g.constant(Tensor::zeros(&[0, 4]));
        let out = g.attention(q, k, k, 2).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 4]);
        assert!(g.value(out).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_cross_entropy_is_zero() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[0, 5]));
        let ce = g.cross_entropy(l, &[]).unwrap();
        assert_eq!(g.value(ce).item().unwrap(), 0.0);
    }
}
