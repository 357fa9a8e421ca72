//! Eager reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Nodes only ever reference earlier nodes, so the tape is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::tensor::{Tensor, TensorError};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 * pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // normalized input and per-row inverse std
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ScaleRows(Var, Var),
    SegmentSum {
        x: Var,
        groups: usize,
        valid: Vec<bool>,
    },
    DivRows(Var, Var),
    Reshape(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; nodes the loss does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor {
        let dims = self.dims[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(dims, g.clone()),
            None => Tensor::zeros(&dims),
        }
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), TensorError> {
    if t.dims().len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            dims: t.dims().to_vec(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.dims().to_vec(),
        rhs: b.dims().to_vec(),
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable `BCE(sigmoid(x), y)`.
pub(crate) fn bce_logit_scalar(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = crate::tensor::matmul(av, bv)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.dims().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds `bias[n]` to every row of `x[.. × n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        if xv.dims().last() != Some(&n) {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.dims().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (dropout keep-masks, validity flags).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: xv.dims().to_vec(),
                rhs: vec![factor.len()],
            });
        }
        let data = xv.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        Ok(self.push(out, Op::MulConst(x, factor)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|a| a * factor).collect();
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|a| a + c).collect();
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        self.push(out, Op::AddScalar(x))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| gelu_scalar(a)).collect();
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        self.push(out, Op::Sigmoid(x))
    }

    /// Standardizes each row over the last dimension, then applies `gain`
    /// and `bias` (both `[D]`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = *xv.dims().last().expect("tensor has at least one extent");
        if gv.len() != d || bv.len() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::from_parts(xv.dims().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of a `[V × D]` table; the result is `[rows.len() × D]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        expect_rank("gather_rows", tv, 2)?;
        let (v, d) = (tv.dims()[0], tv.dims()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(TensorError::IndexOutOfRange { index: r, rows: v });
            }
            data.extend_from_slice(&tv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are `[batch·seq × D]`; keys whose
    /// `key_valid` flag is false receive zero weight (logit −∞).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        expect_rank("attention", qv, 2)?;
        if qv.dims() != kv.dims() || qv.dims() != vv.dims() {
            return Err(mismatch("attention", qv, kv));
        }
        let (rows, d) = (qv.dims()[0], qv.dims()[1]);
        if rows != batch * seq || key_valid.len() != rows || heads == 0 || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: qv.dims().to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut logits = vec![0.0; seq];
        for b in 0..batch {
            let valid = &key_valid[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if !valid[j] {
                            continue;
                        }
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        logits[j] = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        if valid[j] {
                            let e = (logits[j] - max).exp();
                            p[j] = e;
                            total += e;
                        }
                    }
                    let o = &mut out[(b * seq + i) * d + col..][..dh];
                    for j in 0..seq {
                        if !valid[j] {
                            continue;
                        }
                        p[j] /= total;
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p[j] * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Multiplies row `r` of `x[R × D]` by `s[r]`; `s` holds `R` values.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (xv, sv) = (self.value(x), self.value(s));
        let r = sv.len();
        if xv.dims()[0] != r {
            return Err(mismatch("scale_rows", xv, sv));
        }
        let d = xv.len() / r;
        let mut data = xv.data().to_vec();
        for (row, &f) in data.chunks_mut(d).zip(sv.data()) {
            for o in row {
                *o *= f;
            }
        }
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        Ok(self.push(out, Op::ScaleRows(x, s)))
    }

    /// Sums consecutive blocks of rows of `x[R × D]` into `[groups × D]`,
    /// skipping rows whose `valid` flag is false.
    pub fn segment_sum(
        &mut self,
        x: Var,
        groups: usize,
        valid: &[bool],
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let r = xv.dims()[0];
        if groups == 0 || r % groups != 0 || valid.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                lhs: xv.dims().to_vec(),
                rhs: vec![groups, valid.len()],
            });
        }
        let d = xv.len() / r;
        let per = r / groups;
        let mut data = vec![0.0; groups * d];
        for (row_idx, row) in xv.data().chunks(d).enumerate() {
            if !valid[row_idx] {
                continue;
            }
            let g = row_idx / per;
            for (o, v) in data[g * d..(g + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::from_parts(vec![groups, d], data);
        Ok(self.push(
            out,
            Op::SegmentSum {
                x,
                groups,
                valid: valid.to_vec(),
            },
        ))
    }

    /// Divides row `r` of `x[R × D]` by `den[r]`.
    pub fn div_rows(&mut self, x: Var, den: Var) -> Result<Var, TensorError> {
        let (xv, dv) = (self.value(x), self.value(den));
        let r = dv.len();
        if xv.dims()[0] != r {
            return Err(mismatch("div_rows", xv, dv));
        }
        let d = xv.len() / r;
        let mut data = xv.data().to_vec();
        for (row, &f) in data.chunks_mut(d).zip(dv.data()) {
            for o in row {
                *o /= f;
            }
        }
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        Ok(self.push(out, Op::DivRows(x, den)))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshaped(dims)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ w·x` with constant weights; entries with zero weight are skipped.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: xv.dims().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = xv
            .data()
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(a, w)| a * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// `Σ w·BCE(σ(logit), target)`; entries with zero weight never touch
    /// their target, so arbitrary placeholder targets are inert.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if targets.len() != lv.len() || weights.len() != lv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: lv.dims().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let s = lv
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&x, &y), &w)| w * bce_logit_scalar(x, y))
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.dims().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let nn = bv.dims()[1];
                {
                    // dA = dC · Bᵀ
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let gc = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let brow = &bv.data()[p * nn..(p + 1) * nn];
                            ga[i * k + p] += gc.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                // dB = Aᵀ · dC
                let gb = accumulate(&mut grads[b.0], k * nn);
                for i in 0..m {
                    let gc = &g[i * nn..(i + 1) * nn];
                    for p in 0..k {
                        let a_ip = av.data()[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (o, x) in gb[p * nn..(p + 1) * nn].iter_mut().zip(gc) {
                            *o += a_ip * x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let gv = accumulate(&mut grads[v.0], g.len());
                    for (o, x) in gv.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
                let n = len_of(*bias);
                let gb = accumulate(&mut grads[bias.0], n);
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                let gb = accumulate(&mut grads[b.0], g.len());
                for ((o, x), y) in gb.iter_mut().zip(g).zip(av.data()) {
                    *o += x * y;
                }
            }
            Op::MulConst(x, factor) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((o, v), f) in gx.iter_mut().zip(g).zip(factor) {
                    *o += v * f;
                }
            }
            Op::Scale(x, factor) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += v * factor;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((o, v), &a) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *o += v * gelu_grad(a);
                }
            }
            Op::Sigmoid(x) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((o, v), &s) in gx.iter_mut().zip(g).zip(node.value.data()) {
                    *o += v * s * (1.0 - s);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                {
                    let gb = accumulate(&mut grads[bias.0], d);
                    for row_g in g.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row_g) {
                            *o += v;
                        }
                    }
                }
                let gx = accumulate(&mut grads[x.0], g.len());
                let mut dxhat = vec![0.0; d];
                for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dxhat[j] = row_g[j] * gv.data()[j];
                        sum_dh += dxhat[j];
                        sum_dh_h += dxhat[j] * row_h[j];
                    }
                    let inv = inv_std[r];
                    let df = d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += inv / df * (df * dxhat[j] - sum_dh - row_h[j] * sum_dh_h);
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let tv = self.value(*table);
                let d = tv.dims()[1];
                let gt = accumulate(&mut grads[table.0], tv.len());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.dims()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let rows = batch * seq;
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gvv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let go = &g[(b * seq + i) * d + col..][..dh];
                            let mut dot = 0.0;
                            for j in 0..seq {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv.data()[(b * seq + j) * d + col..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += p[j] * dp[j];
                                let gvj = &mut gvv[(b * seq + j) * d + col..][..dh];
                                for (o, x) in gvj.iter_mut().zip(go) {
                                    *o += p[j] * x;
                                }
                            }
                            let qi = &qv.data()[(b * seq + i) * d + col..][..dh];
                            for j in 0..seq {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = &kv.data()[(b * seq + j) * d + col..][..dh];
                                let gqi = &mut gq[(b * seq + i) * d + col..][..dh];
                                for (o, x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk[(b * seq + j) * d + col..][..dh];
                                for (o, x) in gkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                for (var, contrib) in [(q, gq), (k, gk), (v, gvv)] {
                    let gx = accumulate(&mut grads[var.0], rows * d);
                    for (o, x) in gx.iter_mut().zip(&contrib) {
                        *o += x;
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let r = sv.len();
                let d = xv.len() / r;
                {
                    let gx = accumulate(&mut grads[x.0], xv.len());
                    for (row, (gr, &f)) in gx.chunks_mut(d).zip(g.chunks(d).zip(sv.data())) {
                        for (o, v) in row.iter_mut().zip(gr) {
                            *o += v * f;
                        }
                    }
                }
                let gs = accumulate(&mut grads[s.0], r);
                for (o, (gr, xr)) in gs.iter_mut().zip(g.chunks(d).zip(xv.data().chunks(d))) {
                    *o += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::SegmentSum { x, groups, valid } => {
                let xv = self.value(*x);
                let r = xv.dims()[0];
                let d = xv.len() / r;
                let per = r / groups;
                let gx = accumulate(&mut grads[x.0], xv.len());
                for (row_idx, row) in gx.chunks_mut(d).enumerate() {
                    if !valid[row_idx] {
                        continue;
                    }
                    let grp = row_idx / per;
                    for (o, v) in row.iter_mut().zip(&g[grp * d..(grp + 1) * d]) {
                        *o += v;
                    }
                }
            }
            Op::DivRows(x, den) => {
                let dv = self.value(*den);
                let r = dv.len();
                let d = g.len() / r;
                {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (row, (gr, &f)) in gx.chunks_mut(d).zip(g.chunks(d).zip(dv.data())) {
                        for (o, v) in row.iter_mut().zip(gr) {
                            *o += v / f;
                        }
                    }
                }
                // d(x/s)/ds = −(x/s)/s = −out/s
                let gd = accumulate(&mut grads[den.0], r);
                for (o, ((gr, outr), &f)) in gd
                    .iter_mut()
                    .zip(g.chunks(d).zip(node.value.data().chunks(d)).zip(dv.data()))
                {
                    *o -= gr.iter().zip(outr).map(|(a, b)| a * b).sum::<f64>() / f;
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(&mut grads[x.0], len_of(*x));
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::WeightedSum(x, weights) => {
                let gx = accumulate(&mut grads[x.0], weights.len());
                for (o, &w) in gx.iter_mut().zip(weights) {
                    if w != 0.0 {
                        *o += g[0] * w;
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let gl = accumulate(&mut grads[logits.0], weights.len());
                for (i, o) in gl.iter_mut().enumerate() {
                    let w = weights[i];
                    if w != 0.0 {
                        *o += g[0] * w * (sigmoid_scalar(lv.data()[i]) - targets[i]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -2.0, 4.0]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(s).data(), &[1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(w).item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let tiny = sigmoid_scalar(-1000.0);
        assert!(tiny.is_finite() && tiny >= 0.0 && tiny < 1e-300);
        for x in [-30.0, -3.2, -0.1, 0.7, 12.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(100.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 4, vec![5.0, 5.0, 5.0, 5.0, 1.0, 3.0, 1.0, 3.0]).unwrap());
        let g = tape.leaf(Tensor::full(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..4], &[0.0; 4]);
        for (o, e) in out[4..].iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_ignores_masked_keys() {
        // Two keys; the second is masked, so every query copies v0.
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, 2.0]).unwrap());
        let k = tape.leaf(Tensor::matrix(2, 2, vec![0.3, 0.1, 9.0, 9.0]).unwrap());
        let v = tape.leaf(Tensor::matrix(2, 2, vec![4.0, -4.0, 100.0, 100.0]).unwrap());
        let o = tape.attention(q, k, v, 1, 2, 1, &[true, false]).unwrap();
        assert_eq!(tape.value(o).data(), &[4.0, -4.0, 4.0, -4.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.7]).unwrap());
        let b = tape.leaf(Tensor::matrix(3, 2, vec![0.5, 0.1, -0.2, 0.3, 0.8, -0.6]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(c);
        let l = tape.sum(s);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }
}
