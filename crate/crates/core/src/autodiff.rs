//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends a node that
//! keeps its output value and whatever it needs for the backward sweep; node
//! ids are handed out in creation order, so the node list is topologically
//! sorted by construction.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{check_matrix, gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x` plus `table` tiled down the rows of `x`.
    AddTiled(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Square(Var),
    Dropout(Var, Vec<f64>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Attention(Box<AttentionSaved>),
}

#[derive(Debug, Clone)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    heads: usize,
    /// Softmax weights laid out `[group][head][query][key]`.
    weights: Vec<f64>,
    /// Dropout scale factors on the weights, same layout.
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient buffers from one backward sweep.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Leaf for a named parameter; the same name maps to a single node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(Op::Leaf, t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    /// Adds a `[r×n]` table to every consecutive block of `r` rows of `x`.
    /// A bias vector of length `n` is the `r = 1` case.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let tx = self.value(x);
        let tt = self.value(table);
        check_matrix("add_tiled", tx)?;
        let n = tx.cols();
        let r = tt.len() / n.max(1);
        if n == 0 || tt.len() % n != 0 || r == 0 || tx.rows() % r != 0 {
            return Err(Error::dim("add_tiled", tx.shape(), tt.shape()));
        }
        let block = r * n;
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, &t) in chunk.iter_mut().zip(tt.data()) {
                *o += t;
            }
        }
        Ok(self.push(Op::AddTiled(x, table), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        check_matrix("slice_cols", t)?;
        if start + width > t.cols() {
            return Err(Error::dim("slice_cols", t.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(t.rows() * width);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        let out = Tensor::from_vec(&[t.rows(), width], data);
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        for &p in parts {
            check_matrix("concat_cols", self.value(p))?;
            if self.value(p).rows() != m {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_vec(&[m, n], data);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Per-row normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        check_matrix("layer_norm", tx)?;
        let n = tx.cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_vec(tx.shape(), out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(Op::Gelu(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    /// Inverted dropout. Returns `a` itself (no new node) when not training
    /// or when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).len(), rate, rng);
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(t.shape(), data);
        Ok(self.push(Op::Dropout(a, mask), out))
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_matrix("mean_rows", t)?;
        let (m, n) = (t.rows(), t.cols());
        if m == 0 {
            return Err(Error::dim("mean_rows", t.shape(), &[1, n]));
        }
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let out = Tensor::from_vec(&[1, n], out);
        Ok(self.push(Op::MeanRows(a), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_matrix("cross_entropy", t)?;
        let (b, c) = (t.rows(), t.cols());
        if labels.len() != b || b == 0 {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let probs = t.softmax_rows().into_data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            // log-sum-exp keeps huge logits exact
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= b as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean squared difference between every element of `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() {
            return Err(Error::Contract(format!(
                "mse length mismatch: {} predictions vs {} targets",
                t.len(),
                target.len()
            )));
        }
        if t.is_empty() {
            return Err(Error::Contract("mse of empty batch".into()));
        }
        let loss = t
            .data()
            .iter()
            .zip(target)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / t.len() as f64;
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[groups·n × d]`; each block of `n` rows attends only
    /// within itself, and columns are split into `heads` slices of `d / heads`.
    /// Weights are `softmax(Q_h K_hᵀ / sqrt(d / heads))`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        for t in [tq, tk, tv] {
            check_matrix("attention", t)?;
        }
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        let (rows, d) = (tq.rows(), tq.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::dim("attention", tq.shape(), &[groups]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let n = rows / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut weights = vec![0.0; groups * heads * n * n];
        let mut out = vec![0.0; rows * d];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; n * dh];
        let mut vh = vec![0.0; n * dh];
        let mut oh = vec![0.0; n * dh];
        let mut mask = match &dropout {
            Some((rate, _)) => {
                check_rate(*rate)?;
                Some(vec![1.0; weights.len()])
            }
            None => None,
        };
        let mut dropout = dropout;
        for g in 0..groups {
            for h in 0..heads {
                gather_head(tq.data(), &mut qh, g * n, n, d, h * dh, dh);
                gather_head(tk.data(), &mut kh, g * n, n, d, h * dh, dh);
                gather_head(tv.data(), &mut vh, g * n, n, d, h * dh, dh);
                let off = (g * heads + h) * n * n;
                let w = &mut weights[off..off + n * n];
                gemm_nt(&qh, &kh, w, n, dh, n);
                for row in w.chunks_mut(n) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                oh.iter_mut().for_each(|x| *x = 0.0);
                match (&mut dropout, &mut mask) {
                    (Some((rate, rng)), Some(mask)) => {
                        let m = &mut mask[off..off + n * n];
                        let keep = 1.0 / (1.0 - *rate);
                        let mut wd = vec![0.0; n * n];
                        for ((dst, &src), mm) in wd.iter_mut().zip(w.iter()).zip(m.iter_mut()) {
                            *mm = if rng.random::<f64>() < *rate { 0.0 } else { keep };
                            *dst = src * *mm;
                        }
                        gemm_nn(&wd, &vh, &mut oh, n, n, dh);
                    }
                    _ => gemm_nn(w, &vh, &mut oh, n, n, dh),
                }
                scatter_head(&oh, &mut out, g * n, n, d, h * dh, dh);
            }
        }
        let out = Tensor::from_vec(&[rows, d], out);
        Ok(self.push(
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                groups,
                heads,
                weights,
                mask,
            })),
            out,
        ))
    }

    /// Softmax weights recorded by an attention node, `[group][head][n][n]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some((&s.weights, s.groups, s.heads)),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; m * k];
                gemm_nt(gd, tb.data(), &mut da, m, n, k);
                accumulate(grads, *a, ta.shape(), da);
                let mut db = vec![0.0; k * n];
                gemm_tn(ta.data(), gd, &mut db, m, k, n);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, g.shape(), da);
                accumulate(grads, *b, g.shape(), db);
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.shape(), gd.iter().map(|x| x * c).collect());
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.shape(), gd.to_vec()),
            Op::AddTiled(x, table) => {
                accumulate(grads, *x, g.shape(), gd.to_vec());
                let tt = self.value(*table);
                let mut dt = vec![0.0; tt.len()];
                for chunk in gd.chunks(tt.len()) {
                    for (d, v) in dt.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, tt.shape(), dt);
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                let shape = gt.shape().to_vec();
                accumulate(grads, *a, &shape, gt.into_data());
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, self.shape(*a), gd.to_vec());
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (m, n, w) = (ta.rows(), ta.cols(), g.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    let mut dp = Vec::with_capacity(tp.len());
                    for i in 0..tp.rows() {
                        dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    accumulate(grads, p, tp.shape(), dp);
                    offset += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    softmax_backward_row(yr, gr, dr);
                }
                accumulate(grads, *a, y.shape(), da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*x).cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, ((grow, hrow), dxrow)) in gd
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gam[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * hrow[j];
                    }
                    let c = inv_std[r] / n as f64;
                    for j in 0..n {
                        dxrow[j] = c * (n as f64 * dxhat[j] - s1 - hrow[j] * s2);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
                accumulate(grads, *gamma, self.shape(*gamma), dgamma);
                accumulate(grads, *beta, self.shape(*beta), dbeta);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let da = ta
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                let da = ta.data().iter().zip(gd).map(|(x, g)| 2.0 * x * g).collect();
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::Dropout(a, mask) => {
                let da = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let m = ta.rows() as f64;
                let mut da = Vec::with_capacity(ta.len());
                for _ in 0..ta.rows() {
                    da.extend(gd.iter().map(|x| x / m));
                }
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), vec![gd[0]; ta.len()]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let t = self.value(*logits);
                let (b, c) = (t.rows(), t.cols());
                let scale = gd[0] / b as f64;
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= 1.0;
                }
                dl.iter_mut().for_each(|x| *x *= scale);
                accumulate(grads, *logits, t.shape(), dl);
            }
            Op::Mse { pred, target } => {
                let t = self.value(*pred);
                let scale = 2.0 * gd[0] / t.len() as f64;
                let dp = t
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, y)| scale * (p - y))
                    .collect();
                accumulate(grads, *pred, t.shape(), dp);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tq, tk, tv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let (rows, d) = (tq.rows(), tq.cols());
        let n = rows / s.groups;
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; n * dh];
        let mut vh = vec![0.0; n * dh];
        let mut goh = vec![0.0; n * dh];
        let mut dqh = vec![0.0; n * dh];
        let mut dkh = vec![0.0; n * dh];
        let mut dvh = vec![0.0; n * dh];
        let mut dw = vec![0.0; n * n];
        let mut wd = vec![0.0; n * n];
        let mut ds = vec![0.0; n * n];
        for grp in 0..s.groups {
            for h in 0..s.heads {
                let off = (grp * s.heads + h) * n * n;
                let w = &s.weights[off..off + n * n];
                let mask = s.mask.as_ref().map(|m| &m[off..off + n * n]);
                gather_head(tq.data(), &mut qh, grp * n, n, d, h * dh, dh);
                gather_head(tk.data(), &mut kh, grp * n, n, d, h * dh, dh);
                gather_head(tv.data(), &mut vh, grp * n, n, d, h * dh, dh);
                gather_head(g.data(), &mut goh, grp * n, n, d, h * dh, dh);

                // O = (W ⊙ M) V
                match mask {
                    Some(m) => {
                        for ((x, &a), &b) in wd.iter_mut().zip(w).zip(m) {
                            *x = a * b;
                        }
                    }
                    None => wd.copy_from_slice(w),
                }
                dvh.iter_mut().for_each(|x| *x = 0.0);
                gemm_tn(&wd, &goh, &mut dvh, n, n, dh);
                dw.iter_mut().for_each(|x| *x = 0.0);
                gemm_nt(&goh, &vh, &mut dw, n, dh, n);
                if let Some(m) = mask {
                    dw.iter_mut().zip(m).for_each(|(x, &b)| *x *= b);
                }
                for ((dsr, wr), gr) in ds.chunks_mut(n).zip(w.chunks(n)).zip(dw.chunks(n)) {
                    softmax_backward_row(wr, gr, dsr);
                    dsr.iter_mut().for_each(|x| *x *= scale);
                }
                dqh.iter_mut().for_each(|x| *x = 0.0);
                gemm_nn(&ds, &kh, &mut dqh, n, n, dh);
                dkh.iter_mut().for_each(|x| *x = 0.0);
                gemm_tn(&ds, &qh, &mut dkh, n, n, dh);

                scatter_head(&dqh, &mut dq, grp * n, n, d, h * dh, dh);
                scatter_head(&dkh, &mut dk, grp * n, n, d, h * dh, dh);
                scatter_head(&dvh, &mut dv, grp * n, n, d, h * dh, dh);
            }
        }
        accumulate(grads, s.q, tq.shape(), dq);
        accumulate(grads, s.k, tk.shape(), dk);
        accumulate(grads, s.v, tv.shape(), dv);
    }
}

fn softmax_backward_row(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yy), &gg) in out.iter_mut().zip(y).zip(g) {
        *o = yy * (gg - dot);
    }
}

fn gather_head(src: &[f64], dst: &mut [f64], row0: usize, n: usize, d: usize, col0: usize, dh: usize) {
    for i in 0..n {
        let s = (row0 + i) * d + col0;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], row0: usize, n: usize, d: usize, col0: usize, dh: usize) {
    for i in 0..n {
        let s = (row0 + i) * d + col0;
        dst[s..s + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_vec(shape, delta)),
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Dropout on a plain tensor; identity (bit-exact) in eval mode.
pub fn dropout_apply(x: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok(Tensor::from_vec(x.shape(), data))
}

/// `x·weight + bias` on the tape.
pub fn linear_apply(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    let out_cols = tape.value(xw).cols();
    if tape.value(bias).len() != out_cols {
        return Err(Error::dim("linear_apply", tape.value(weight).shape(), tape.value(bias).shape()));
    }
    tape.add_tiled(xw, bias)
}

/// dLoss/dParam for every parameter in `params`; parameters the loss does not
/// reach get zeros.
pub fn gradient_of(tape: &Tape, loss: Var, params: &ParamStore) -> Result<HashMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(params
        .iter()
        .map(|(name, value)| {
            let g = tape
                .param_var(name)
                .and_then(|v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            (name.to_string(), g)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut p = ParamStore::new(0);
        for (n, t) in entries {
            p.insert(n, t.clone());
        }
        p
    }

    #[test]
    fn linear_apply_identity_and_sum_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::eye(2));
        let w = tape.constant(Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 5.0]]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = linear_apply(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 0.0, 0.0, 5.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let w = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let b = tape.constant(Tensor::from_vec(&[1], vec![1.0]));
        let y = linear_apply(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_apply_names_both_shapes_on_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let msg = linear_apply(&mut tape, x, w, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).softmax_rows();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).softmax_rows();
        for &p in t.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).softmax_rows();
        assert!((t.data()[0] - 0.25).abs() < 1e-15);
        assert!((t.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn dropout_edge_cases() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.5]);
        let mut rng = stream(1, Stream::Test, 0);
        assert_eq!(dropout_apply(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(
            dropout_apply(&x, 1.0, true, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let x = Tensor::full(&[n], 2.0);
        let mut rng = stream(3, Stream::Test, 0);
        let y = dropout_apply(&x, 0.5, true, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((0.49..=0.51).contains(&survivors), "{survivors}");
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "{mean}");
    }

    #[test]
    fn gradient_closed_forms() {
        let p = store(&[
            ("w", Tensor::from_vec(&[2, 3], vec![0.3; 6])),
            ("u", Tensor::scalar(5.0)),
            ("unused", Tensor::zeros(&[4])),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&p, "w").unwrap();
        let loss = tape.sum(w);
        let g = gradient_of(&tape, loss, &p).unwrap();
        assert_eq!(g["w"].data(), &[1.0; 6]);
        assert_eq!(g["unused"], Tensor::zeros(&[4]));

        let mut tape = Tape::new();
        let u = tape.param(&p, "u").unwrap();
        let d = tape.add_scalar(u, -3.0);
        let loss = tape.square(d);
        let g = gradient_of(&tape, loss, &p).unwrap();
        assert_eq!(g["u"].item(), 4.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_chain_gradient_is_product_of_transposes() {
        // loss = sum(x W1 W2 W3) => dL/dx = 1 · (W1 W2 W3)ᵀ
        let mut rng = stream(11, Stream::Test, 0);
        let mats: Vec<Tensor> = [(3, 4), (4, 2), (2, 5)]
            .iter()
            .map(|&(r, c)| Tensor::from_vec(&[r, c], (0..r * c).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        let x0 = Tensor::from_vec(&[1, 3], vec![0.2, -0.7, 1.1]);
        let p = store(&[("x", x0)]);
        let mut tape = Tape::new();
        let mut h = tape.param(&p, "x").unwrap();
        for m in &mats {
            let w = tape.constant(m.clone());
            h = tape.matmul(h, w).unwrap();
        }
        let loss = tape.sum(h);
        let g = gradient_of(&tape, loss, &p).unwrap();

        let prod = crate::tensor::matmul(&crate::tensor::matmul(&mats[0], &mats[1]).unwrap(), &mats[2]).unwrap();
        let ones = Tensor::full(&[1, 5], 1.0);
        let expect = crate::tensor::matmul(&ones, &prod.transpose()).unwrap();
        assert!(g["x"].max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        let ce = tape.cross_entropy(l, &[0, 2]).unwrap();
        assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-15);

        let l = tape.constant(Tensor::from_rows(&[vec![1e4, 0.0, 0.0]]));
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-12);

        let l = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(l, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 6]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(tape.attention(a, a, b, 1, 1, None), Err(Error::Dimension { .. })));
        assert!(matches!(tape.attention(a, a, a, 3, 1, None), Err(Error::Dimension { .. })));
        assert!(matches!(tape.attention(a, a, a, 1, 4, None), Err(Error::Config(_))));
    }
}
