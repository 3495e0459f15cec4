//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Nodes are appended in evaluation order, so index order is a topological
//! order and the backward sweep is a single reverse pass. Parameters are
//! registered by name; only *tracked* parameters receive gradients, which is
//! how frozen weights are expressed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{mm, mm_t, softmax_in_place, t_mm, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient of a scalar loss with respect to each tracked parameter.
pub type Gradients = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Cos(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        positions: Vec<usize>,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<Vec<f64>>,
        total_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl GradTape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the parameters that will receive gradients.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Per-head attention probabilities recorded by [`GradTape::causal_attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Register a named parameter. Untracked parameters behave as constants and
    /// never appear in the gradient map.
    pub fn param(&mut self, name: &str, value: Tensor, tracked: bool) -> Var {
        let v = self.push(value, Op::Leaf, tracked);
        if tracked {
            debug_assert!(
                self.params.iter().all(|(n, _)| n != name),
                "parameter {name} registered twice"
            );
            self.params.push((name.to_string(), v));
        }
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let data = mm(self.value(a).data(), self.value(b).data(), m, p, q);
        let value = Tensor::new(vec![m, q], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a . b^T`, the layout of a linear layer with weight `b[out x in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_t", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[0]);
        let data = mm_t(self.value(a).data(), self.value(b).data(), m, p, q);
        let value = Tensor::new(vec![m, q], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b)).map_err(|_| {
            Error::shape("add", self.shape(a), self.shape(b))
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b)).map_err(|_| {
            Error::shape("sub", self.shape(a), self.shape(b))
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| Error::shape("mul", self.shape(a), self.shape(b)))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c || (xv.rank() < 2 && xv.rank() != 1) {
            return Err(Error::shape(name, xv.shape(), rv.shape()));
        }
        let mut out = xv.data().to_vec();
        if c > 0 {
            for chunk in out.chunks_mut(c) {
                for (o, r) in chunk.iter_mut().zip(rv.data()) {
                    *o = f(*o, *r);
                }
            }
        }
        Ok(out)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let data = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let data = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(value, Op::MulRow(x, row), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        let rg = self.rg(&[a]);
        self.push(value, Op::Cos(a), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gain)));
        }
        if c == 0 {
            return Err(Error::Input("layer_norm needs d >= 1".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Causal multi-head scaled dot-product attention over `[n x d]` inputs.
    /// Probabilities above the diagonal are exactly zero.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 2 || qs != ks || qs != vs {
            return Err(Error::shape("causal_attention", qs, ks));
        }
        let (n, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Input(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut p[i * n..i * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(Tensor::new(vec![n, n], p)?);
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Input(format!("token id {id} out of range 0..{r}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows, as a `[1 x c]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::Input("mean over zero rows".into()));
        }
        let c = t.cols();
        let value = t.mean_rows().reshape(vec![1, c])?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Each row divided by `max(||row||, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            for v in row.iter_mut() {
                *v /= d;
            }
            norms.push(n);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::NormalizeRows { x, norms, eps }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len().max(1) as f64;
        let value = Tensor::scalar(t.sum() / n);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Weighted mean negative log-likelihood of `targets[t]` under the
    /// softmax of `logits` row `positions[t]`. Zero when all weights vanish.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        positions: &[usize],
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        if positions.len() != targets.len() || targets.len() != weights.len() {
            return Err(Error::Input(format!(
                "cross_entropy: {} positions, {} targets, {} weights",
                positions.len(),
                targets.len(),
                weights.len()
            )));
        }
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        let total_weight: f64 = weights.iter().sum();
        let mut probs = Vec::with_capacity(positions.len());
        let mut loss = 0.0;
        for ((&pos, &target), &w) in positions.iter().zip(targets).zip(weights) {
            if pos >= r || target >= c {
                return Err(Error::Input(format!(
                    "cross_entropy index ({pos}, {target}) outside logits {r}x{c}"
                )));
            }
            let mut p = t.row(pos).to_vec();
            softmax_in_place(&mut p);
            if w != 0.0 {
                let row = t.row(pos);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += w * (lse - row[target]);
            }
            probs.push(p);
        }
        let value = if total_weight > 0.0 {
            loss / total_weight
        } else {
            0.0
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                positions: positions.to_vec(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every tracked parameter.
    /// Tracked parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            if v.0 > loss.0 {
                out.insert(name.clone(), Tensor::zeros(self.shape(*v)));
                continue;
            }
            let data = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
            out.insert(name.clone(), Tensor::new(self.shape(*v).to_vec(), data)?);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = as_matrix(self.shape(*a));
                let q = self.shape(*b)[1];
                if rg(*a) {
                    let da = mm_t(g, val(*b), m, q, p);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let db = t_mm(val(*a), g, m, p, q);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, p) = as_matrix(self.shape(*a));
                let q = self.shape(*b)[0];
                if rg(*a) {
                    let da = mm(g, val(*b), m, q, p);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let db = t_mm(g, val(*a), m, q, p);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = as_matrix(self.shape(*a));
                // g has shape [c x r]
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let da = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let db = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| s * x).collect());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.to_vec());
                if rg(*row) {
                    let c = self.nodes[row.0].value.len();
                    let mut dr = vec![0.0; c];
                    if c > 0 {
                        for chunk in g.chunks(c) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(x, row) => {
                let r = val(*row);
                let c = r.len();
                if c == 0 {
                    return;
                }
                if rg(*x) {
                    let mut dx = g.to_vec();
                    for chunk in dx.chunks_mut(c) {
                        for (d, w) in chunk.iter_mut().zip(r) {
                            *d *= w;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if rg(*row) {
                    let mut dr = vec![0.0; c];
                    for (gc, xc) in g.chunks(c).zip(val(*x).chunks(c)) {
                        for ((d, gv), xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xv;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da = g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Cos(a) => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, xv)| -gv * xv.sin())
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.nodes[gain.0].value.len();
                let r = inv_std.len();
                let gv = val(*gain);
                if rg(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        let hi = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gi[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hi[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gi[j] * gv[j];
                            dx[i * c + j] = inv_std[i] * (d - mean_d - hi[j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if rg(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gc, hc) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gv), hv) in dg.iter_mut().zip(gc).zip(hc) {
                            *d += gv * hv;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if rg(*bias) {
                    let mut db = vec![0.0; c];
                    for gc in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(gc) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = self.shape(*q);
                let (n, d) = (s[0], s[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut ds = vec![0.0; n];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    let p = p.data();
                    for i in 0..n {
                        let gi = &g[i * d + off..i * d + off + dh];
                        let prow = &p[i * n..i * n + i + 1];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = dp;
                            dot += prow[j] * dp;
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (o, gv) in dvj.iter_mut().zip(gi) {
                                *o += prow[j] * gv;
                            }
                        }
                        for j in 0..=i {
                            let dsij = prow[j] * (ds[j] - dot) * scale;
                            if dsij == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += dsij * kd[j * d + off + c];
                                dk[j * d + off + c] += dsij * qd[i * d + off + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SliceRows { x, start } => {
                let src = &self.nodes[x.0].value;
                let c = src.cols();
                let mut dx = vec![0.0; src.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Gather { table, ids } => {
                let t = &self.nodes[table.0].value;
                let c = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[i * c + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MeanRows(x) => {
                let t = &self.nodes[x.0].value;
                let (r, c) = (t.rows(), t.cols());
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(g.iter().map(|v| v / r as f64));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    if n > *eps {
                        let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = (gi[j] - yi[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gi[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                positions,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                if *total_weight <= 0.0 {
                    return;
                }
                let t = &self.nodes[logits.0].value;
                let c = t.cols();
                let mut dl = vec![0.0; t.len()];
                for (((&pos, &target), &w), p) in
                    positions.iter().zip(targets).zip(weights).zip(probs)
                {
                    if w == 0.0 {
                        continue;
                    }
                    let coef = g[0] * w / total_weight;
                    let row = &mut dl[pos * c..(pos + 1) * c];
                    for (d, pv) in row.iter_mut().zip(p) {
                        *d += coef * pv;
                    }
                    row[target] -= coef;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param("x", Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g["x"].data(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = GradTape::new();
        let _w = tape.param("w", Tensor::filled(&[2, 2], 1.5), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        let g = tape.backward(loss).unwrap();
        assert!(g["w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_parameters_are_absent() {
        let mut tape = GradTape::new();
        let a = tape.param("a", Tensor::scalar(2.0), true);
        let b = tape.param("b", Tensor::scalar(5.0), false);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g["a"].data(), &[5.0]);
        assert!(!g.contains_key("b"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let a = tape.param("a", Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_is_causal_and_normalised() {
        let mut rng = crate::numerics::Prng::new(5, 0);
        let mut tape = GradTape::new();
        let q = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let o = tape.causal_attention(q, k, v, 2).unwrap();
        for p in tape.attention_probs(o).unwrap() {
            for i in 0..5 {
                let row = p.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
}
