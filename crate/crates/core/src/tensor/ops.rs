//! Tape operations: forward builders (methods on [`Tape`]) and the backward
//! dispatch. Every op records just enough to replay its vector-Jacobian
//! product from the arena; saved activations live in the nodes themselves.

use std::rc::Rc;

use super::kernels::{lanes, matmul, matmul_acc, read_lane, transpose2d};
use super::{add_into, grad_buf, Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{draw_at, StreamRng};
use crate::scalar::Scalar;

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddBias { x: usize, bias: usize, cols: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// a [batch,m,k] x b [batch,k,n] -> [batch,m,n]
    BatchMatmul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    /// a [batch,m,k] x b [batch,n,k] transposed -> [batch,m,n]
    BatchMatmulNT { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    /// Tile the whole buffer `times` times along a new leading axis.
    Repeat { x: usize, times: usize },
    Gelu(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    /// stats holds (mean, rstd) per row of the normalized last dimension.
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: Vec<(S, S)> },
    CrossEntropy { logits: usize, rows: Vec<usize>, targets: Vec<usize>, vocab: usize },
    BceLogits { logits: usize, rows: Vec<usize>, labels: Vec<bool> },
    Gather { table: usize, rows: Vec<usize>, cols: usize },
    Dropout { x: usize, p: f64, key: u64 },
    AttentionBias {
        table: usize,
        theta_q: usize,
        theta_k: usize,
        buckets: Rc<Vec<u16>>,
        heads: usize,
        seq: usize,
        tupe: bool,
    },
    ReduceSum(usize),
    ReduceMean(usize),
}

struct Arg<S: Scalar> {
    id: usize,
    data: Rc<Vec<S>>,
    shape: Vec<usize>,
    rg: bool,
}

impl<S: Scalar> Tape<S> {
    fn input(&self, t: &Tensor<S>) -> Result<Arg<S>> {
        let id = self.arg(t)?;
        let nodes = self.nodes.borrow();
        Ok(Arg {
            id,
            data: Rc::clone(&nodes[id].data),
            shape: nodes[id].shape.clone(),
            rg: nodes[id].requires_grad,
        })
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.input(a)?, self.input(b)?);
        if a.shape != b.shape {
            return Err(Error::Shape { op: "add", lhs: a.shape, rhs: b.shape });
        }
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.emit(a.shape, data, a.rg || b.rg, Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.input(a)?, self.input(b)?);
        if a.shape != b.shape {
            return Err(Error::Shape { op: "sub", lhs: a.shape, rhs: b.shape });
        }
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x - y).collect();
        Ok(self.emit(a.shape, data, a.rg || b.rg, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.input(a)?, self.input(b)?);
        if a.shape != b.shape {
            return Err(Error::Shape { op: "mul", lhs: a.shape, rhs: b.shape });
        }
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.emit(a.shape, data, a.rg || b.rg, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&self, a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let a = self.input(a)?;
        let data = a.data.iter().map(|&x| x * c).collect();
        Ok(self.emit(a.shape, data, a.rg, Op::Scale(a.id, c)))
    }

    /// Broadcast a 1-d bias over the last dimension (the only broadcast).
    pub fn add_bias(&self, x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (x, bias) = (self.input(x)?, self.input(bias)?);
        let cols = *x.shape.last().unwrap_or(&0);
        if bias.shape.len() != 1 || bias.shape[0] != cols {
            return Err(Error::Shape { op: "add_bias", lhs: x.shape, rhs: bias.shape });
        }
        let mut data = x.data.as_ref().clone();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(bias.data.iter()) {
                *v += b;
            }
        }
        Ok(self.emit(x.shape, data, x.rg || bias.rg, Op::AddBias { x: x.id, bias: bias.id, cols }))
    }

    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.input(a)?, self.input(b)?);
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::Shape { op: "matmul", lhs: a.shape, rhs: b.shape });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let data = matmul(&a.data, &b.data, m, k, n);
        Ok(self.emit(vec![m, n], data, a.rg || b.rg, Op::Matmul { a: a.id, b: b.id, m, k, n }))
    }

    pub fn batch_matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.input(a)?, self.input(b)?);
        if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
            return Err(Error::Shape { op: "batch_matmul", lhs: a.shape, rhs: b.shape });
        }
        let (batch, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
        let mut data = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            matmul_acc(
                &mut data[t * m * n..(t + 1) * m * n],
                &a.data[t * m * k..(t + 1) * m * k],
                &b.data[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            );
        }
        Ok(self.emit(vec![batch, m, n], data, a.rg || b.rg, Op::BatchMatmul { a: a.id, b: b.id, batch, m, k, n }))
    }

    /// Batched a x b^T; the workhorse of attention scores.
    pub fn batch_matmul_nt(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.input(a)?, self.input(b)?);
        if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] {
            return Err(Error::Shape { op: "batch_matmul_nt", lhs: a.shape, rhs: b.shape });
        }
        let (batch, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[1]);
        let mut data = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let bt = transpose2d(&b.data[t * n * k..(t + 1) * n * k], n, k);
            matmul_acc(
                &mut data[t * m * n..(t + 1) * m * n],
                &a.data[t * m * k..(t + 1) * m * k],
                &bt,
                m,
                k,
                n,
            );
        }
        Ok(self.emit(vec![batch, m, n], data, a.rg || b.rg, Op::BatchMatmulNT { a: a.id, b: b.id, batch, m, k, n }))
    }

    pub fn reshape(&self, x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        if shape.iter().product::<usize>() != x.data.len() {
            return Err(Error::Shape { op: "reshape", lhs: x.shape, rhs: shape.to_vec() });
        }
        Ok(self.emit_shared(shape.to_vec(), Rc::clone(&x.data), x.rg, Op::Reshape(x.id)))
    }

    pub fn permute(&self, x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        let rank = x.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape { op: "permute", lhs: x.shape, rhs: perm.to_vec() });
        }
        let (out_shape, data) = permute_data(&x.data, &x.shape, perm);
        Ok(self.emit(out_shape, data, x.rg, Op::Permute { x: x.id, perm: perm.to_vec() }))
    }

    pub fn transpose(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.permute(x, &[1, 0])
    }

    /// [times, ..shape] tiling of the whole tensor; backward sums the copies.
    pub fn repeat(&self, x: &Tensor<S>, times: usize) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        let mut data = Vec::with_capacity(x.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&x.data);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(&x.shape);
        Ok(self.emit(shape, data, x.rg, Op::Repeat { x: x.id, times }))
    }

    pub fn gelu(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        let data = x.data.iter().map(|&v| gelu_val(v)).collect();
        Ok(self.emit(x.shape, data, x.rg, Op::Gelu(x.id)))
    }

    pub fn relu(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        let data = x.data.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        Ok(self.emit(x.shape, data, x.rg, Op::Relu(x.id)))
    }

    pub fn softmax(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        if axis >= x.shape.len() {
            return Err(Error::Shape { op: "softmax", lhs: x.shape, rhs: vec![axis] });
        }
        let mut data = vec![S::zero(); x.data.len()];
        let mut lane = Vec::new();
        for (base, stride, len) in lanes(&x.shape, axis) {
            read_lane(&x.data, base, stride, len, &mut lane);
            let m = lane_max(&lane).ok_or_else(|| Error::Numeric("softmax: non-finite input".into()))?;
            let mut denom = S::zero();
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                denom += *v;
            }
            for (t, &e) in lane.iter().enumerate() {
                data[base + t * stride] = e / denom;
            }
        }
        Ok(self.emit(x.shape, data, x.rg, Op::Softmax { x: x.id, axis }))
    }

    pub fn log_softmax(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        if axis >= x.shape.len() {
            return Err(Error::Shape { op: "log_softmax", lhs: x.shape, rhs: vec![axis] });
        }
        let mut data = vec![S::zero(); x.data.len()];
        let mut lane = Vec::new();
        for (base, stride, len) in lanes(&x.shape, axis) {
            read_lane(&x.data, base, stride, len, &mut lane);
            let m = lane_max(&lane).ok_or_else(|| Error::Numeric("log_softmax: non-finite input".into()))?;
            let lse = m + lane.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for (t, &v) in lane.iter().enumerate() {
                data[base + t * stride] = v - lse;
            }
        }
        Ok(self.emit(x.shape, data, x.rg, Op::LogSoftmax { x: x.id, axis }))
    }

    /// Normalize the last dimension to zero mean / unit variance, then affine.
    pub fn layer_norm(&self, x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        if eps <= S::zero() {
            return Err(Error::config("layer_norm: eps must be > 0"));
        }
        let (x, gamma, beta) = (self.input(x)?, self.input(gamma)?, self.input(beta)?);
        let cols = *x.shape.last().unwrap_or(&0);
        if gamma.shape != [cols] || beta.shape != [cols] || cols == 0 {
            return Err(Error::Shape { op: "layer_norm", lhs: x.shape, rhs: gamma.shape });
        }
        let rows = x.data.len() / cols;
        let mut data = vec![S::zero(); x.data.len()];
        let mut stats = Vec::with_capacity(rows);
        let nf = S::of_usize(cols);
        for r in 0..rows {
            let xi = &x.data[r * cols..(r + 1) * cols];
            let mean = xi.iter().copied().sum::<S>() / nf;
            let var = xi.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let rstd = S::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            let out = &mut data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                out[j] = (xi[j] - mean) * rstd * gamma.data[j] + beta.data[j];
            }
        }
        let rg = x.rg || gamma.rg || beta.rg;
        Ok(self.emit(x.shape, data, rg, Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, stats }))
    }

    /// Mean NLL over the selected rows of [n, V] logits (all rows when
    /// `rows` is None), predicting `targets[r]` for each selected row r.
    pub fn cross_entropy(&self, logits: &Tensor<S>, targets: &[usize], rows: Option<&[usize]>) -> Result<Tensor<S>> {
        let x = self.input(logits)?;
        if x.shape.len() != 2 {
            return Err(Error::Shape { op: "cross_entropy", lhs: x.shape, rhs: vec![0, 0] });
        }
        let (n, vocab) = (x.shape[0], x.shape[1]);
        if targets.len() != n {
            return Err(Error::Shape { op: "cross_entropy", lhs: vec![targets.len()], rhs: vec![n] });
        }
        let rows: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..n).collect(),
        };
        if rows.is_empty() {
            return Err(Error::data("cross_entropy: empty selection"));
        }
        let mut total = S::zero();
        for &r in &rows {
            if r >= n {
                return Err(Error::data(format!("cross_entropy: row {r} out of {n}")));
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::data(format!("cross_entropy: target {t} out of vocab {vocab}")));
            }
            let xi = &x.data[r * vocab..(r + 1) * vocab];
            let m = xi.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = m + xi.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            total += lse - xi[t];
        }
        let loss = total / S::of_usize(rows.len());
        Ok(self.emit(vec![], vec![loss], x.rg, Op::CrossEntropy { logits: x.id, rows, targets: targets.to_vec(), vocab }))
    }

    /// Mean binary cross-entropy (log-space stable) over selected positions
    /// of flat logits; labels[r] = true means class 1.
    pub fn bce_with_logits(&self, logits: &Tensor<S>, labels: &[bool], rows: Option<&[usize]>) -> Result<Tensor<S>> {
        let x = self.input(logits)?;
        let n = x.data.len();
        if labels.len() != n {
            return Err(Error::Shape { op: "bce_with_logits", lhs: vec![labels.len()], rhs: vec![n] });
        }
        let rows: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..n).collect(),
        };
        if rows.is_empty() {
            return Err(Error::data("bce_with_logits: empty selection"));
        }
        let mut total = S::zero();
        for &r in &rows {
            let z = x.data[r];
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            let zy = if labels[r] { z } else { S::zero() };
            total += z.max(S::zero()) - zy + (-z.abs()).exp().ln_1p();
        }
        let loss = total / S::of_usize(rows.len());
        Ok(self.emit(vec![], vec![loss], x.rg, Op::BceLogits { logits: x.id, rows, labels: labels.to_vec() }))
    }

    /// Row gather from a [r, c] table: embedding lookup and [CLS] pooling.
    pub fn gather_rows(&self, table: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
        let t = self.input(table)?;
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "gather_rows", lhs: t.shape, rhs: vec![0, 0] });
        }
        let (r_total, cols) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= r_total {
                return Err(Error::data(format!("gather_rows: row {r} out of {r_total}")));
            }
            data.extend_from_slice(&t.data[r * cols..(r + 1) * cols]);
        }
        Ok(self.emit(vec![rows.len(), cols], data, t.rg, Op::Gather { table: t.id, rows: rows.to_vec(), cols }))
    }

    /// Inverted dropout with a position-keyed mask: element i is kept iff
    /// draw_at(key, i) maps into [p, 1). p = 0 is the identity (no node).
    pub fn dropout(&self, x: &Tensor<S>, p: f64, rng: &StreamRng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout: p = {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let x = self.input(x)?;
        let key = rng.key();
        let scale = S::of_f64(1.0 / (1.0 - p));
        let data = x
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if kept(key, i as u64, p) { v * scale } else { S::zero() })
            .collect();
        Ok(self.emit(x.shape, data, x.rg, Op::Dropout { x: x.id, p, key }))
    }

    /// Relative-position attention bias [heads, seq, seq] from a bucketed
    /// table, with the optional learned row-0/column-0 reset. The corner
    /// cell takes the query value.
    pub fn attention_bias(
        &self,
        table: &Tensor<S>,
        theta_q: &Tensor<S>,
        theta_k: &Tensor<S>,
        buckets: Rc<Vec<u16>>,
        seq: usize,
        tupe: bool,
    ) -> Result<Tensor<S>> {
        let (t, tq, tk) = (self.input(table)?, self.input(theta_q)?, self.input(theta_k)?);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "attention_bias", lhs: t.shape, rhs: vec![0, 0] });
        }
        let (heads, bins) = (t.shape[0], t.shape[1]);
        if tq.shape != [heads] || tk.shape != [heads] || buckets.len() != seq * seq {
            return Err(Error::Shape { op: "attention_bias", lhs: tq.shape, rhs: vec![heads] });
        }
        let mut data = Vec::with_capacity(heads * seq * seq);
        for h in 0..heads {
            for i in 0..seq {
                for j in 0..seq {
                    let v = if tupe && i == 0 {
                        tq.data[h]
                    } else if tupe && j == 0 {
                        tk.data[h]
                    } else {
                        let b = buckets[i * seq + j] as usize;
                        debug_assert!(b < bins);
                        t.data[h * bins + b]
                    };
                    data.push(v);
                }
            }
        }
        let rg = t.rg || tq.rg || tk.rg;
        Ok(self.emit(
            vec![heads, seq, seq],
            data,
            rg,
            Op::AttentionBias { table: t.id, theta_q: tq.id, theta_k: tk.id, buckets, heads, seq, tupe },
        ))
    }

    pub fn reduce_sum(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        let s = x.data.iter().copied().sum::<S>();
        Ok(self.emit(vec![], vec![s], x.rg, Op::ReduceSum(x.id)))
    }

    pub fn reduce_mean(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.input(x)?;
        if x.data.is_empty() {
            return Err(Error::data("reduce_mean: empty tensor"));
        }
        let s = x.data.iter().copied().sum::<S>() / S::of_usize(x.data.len());
        Ok(self.emit(vec![], vec![s], x.rg, Op::ReduceMean(x.id)))
    }
}

/// Max of a lane, or None if any element is non-finite.
fn lane_max<S: Scalar>(lane: &[S]) -> Option<S> {
    let mut m = S::neg_infinity();
    for &v in lane {
        if !v.is_finite() {
            return None;
        }
        if v > m {
            m = v;
        }
    }
    Some(m)
}

pub(crate) fn kept(key: u64, i: u64, p: f64) -> bool {
    ((draw_at(key, i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) >= p
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_val<S: Scalar>(x: S) -> S {
    let a = S::of_f64(GELU_A);
    let c = S::of_f64(GELU_C);
    let half = S::of_f64(0.5);
    let u = a * (x + c * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let a = S::of_f64(GELU_A);
    let c = S::of_f64(GELU_C);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let u = a * (x + c * x * x * x);
    let th = u.tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * a * (S::one() + three * c * x * x)
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn permute_data<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_stride = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_stride[d] = in_stride[d + 1] * shape[d + 1];
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_stride[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut coords = vec![0usize; rank];
    let mut at = 0usize;
    for _ in 0..x.len() {
        out.push(x[at]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            at += step[d];
            if coords[d] < out_shape[d] {
                break;
            }
            at -= step[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    (out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

/// One node's vector-Jacobian product: route `g` (d loss / d node) into the
/// gradient slots of the node's inputs.
pub(crate) fn backprop<S: Scalar>(nodes: &[Node<S>], id: usize, g: &[S], slots: &mut [Option<Vec<S>>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                add_into(&mut slots[*a], g);
            }
            if rg(*b) {
                add_into(&mut slots[*b], g);
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                add_into(&mut slots[*a], g);
            }
            if rg(*b) {
                let gb = grad_buf(&mut slots[*b], g.len());
                for (o, &gv) in gb.iter_mut().zip(g) {
                    *o -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let bd = Rc::clone(&nodes[*b].data);
                let ga = grad_buf(&mut slots[*a], g.len());
                for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(bd.iter()) {
                    *o += gv * bv;
                }
            }
            if rg(*b) {
                let ad = Rc::clone(&nodes[*a].data);
                let gb = grad_buf(&mut slots[*b], g.len());
                for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ad.iter()) {
                    *o += gv * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if rg(*a) {
                let ga = grad_buf(&mut slots[*a], g.len());
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }
        }
        Op::AddBias { x, bias, cols } => {
            if rg(*x) {
                add_into(&mut slots[*x], g);
            }
            if rg(*bias) {
                let gb = grad_buf(&mut slots[*bias], *cols);
                for row in g.chunks(*cols) {
                    for (o, &gv) in gb.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if rg(*a) {
                let bt = transpose2d(&nodes[*b].data, *k, *n);
                let ga = grad_buf(&mut slots[*a], m * k);
                matmul_acc(ga, g, &bt, *m, *n, *k);
            }
            if rg(*b) {
                let at = transpose2d(&nodes[*a].data, *m, *k);
                let gb = grad_buf(&mut slots[*b], k * n);
                matmul_acc(gb, &at, g, *k, *m, *n);
            }
        }
        Op::BatchMatmul { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            for t in 0..*batch {
                let gc = &g[t * m * n..(t + 1) * m * n];
                if rg(*a) {
                    let bt = transpose2d(&nodes[*b].data[t * k * n..(t + 1) * k * n], k, n);
                    let ga = grad_buf(&mut slots[*a], batch * m * k);
                    matmul_acc(&mut ga[t * m * k..(t + 1) * m * k], gc, &bt, m, n, k);
                }
                if rg(*b) {
                    let at = transpose2d(&nodes[*a].data[t * m * k..(t + 1) * m * k], m, k);
                    let gb = grad_buf(&mut slots[*b], batch * k * n);
                    matmul_acc(&mut gb[t * k * n..(t + 1) * k * n], &at, gc, k, m, n);
                }
            }
        }
        Op::BatchMatmulNT { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            for t in 0..*batch {
                let gc = &g[t * m * n..(t + 1) * m * n];
                if rg(*a) {
                    let ga = grad_buf(&mut slots[*a], batch * m * k);
                    matmul_acc(
                        &mut ga[t * m * k..(t + 1) * m * k],
                        gc,
                        &nodes[*b].data[t * n * k..(t + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
                if rg(*b) {
                    let gt = transpose2d(gc, m, n);
                    let gb = grad_buf(&mut slots[*b], batch * n * k);
                    matmul_acc(
                        &mut gb[t * n * k..(t + 1) * n * k],
                        &gt,
                        &nodes[*a].data[t * m * k..(t + 1) * m * k],
                        n,
                        m,
                        k,
                    );
                }
            }
        }
        Op::Reshape(x) => {
            if rg(*x) {
                add_into(&mut slots[*x], g);
            }
        }
        Op::Permute { x, perm } => {
            if rg(*x) {
                let (_, back) = permute_data(g, &nodes[id].shape, &invert_perm(perm));
                add_into(&mut slots[*x], &back);
            }
        }
        Op::Repeat { x, times } => {
            if rg(*x) {
                let len = g.len() / times;
                let gx = grad_buf(&mut slots[*x], len);
                for chunk in g.chunks(len) {
                    for (o, &gv) in gx.iter_mut().zip(chunk) {
                        *o += gv;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if rg(*x) {
                let xd = Rc::clone(&nodes[*x].data);
                let gx = grad_buf(&mut slots[*x], g.len());
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd.iter()) {
                    *o += gv * gelu_grad(xv);
                }
            }
        }
        Op::Relu(x) => {
            if rg(*x) {
                let xd = Rc::clone(&nodes[*x].data);
                let gx = grad_buf(&mut slots[*x], g.len());
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd.iter()) {
                    if xv > S::zero() {
                        *o += gv;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if rg(*x) {
                let y = Rc::clone(&nodes[id].data);
                let shape = nodes[id].shape.clone();
                let gx = grad_buf(&mut slots[*x], g.len());
                for (base, stride, len) in lanes(&shape, *axis) {
                    let mut dot = S::zero();
                    for t in 0..len {
                        let idx = base + t * stride;
                        dot += g[idx] * y[idx];
                    }
                    for t in 0..len {
                        let idx = base + t * stride;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            if rg(*x) {
                let y = Rc::clone(&nodes[id].data);
                let shape = nodes[id].shape.clone();
                let gx = grad_buf(&mut slots[*x], g.len());
                for (base, stride, len) in lanes(&shape, *axis) {
                    let mut gsum = S::zero();
                    for t in 0..len {
                        gsum += g[base + t * stride];
                    }
                    for t in 0..len {
                        let idx = base + t * stride;
                        gx[idx] += g[idx] - y[idx].exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let xd = Rc::clone(&nodes[*x].data);
            let gd = Rc::clone(&nodes[*gamma].data);
            let cols = nodes[*gamma].shape[0];
            let rows = xd.len() / cols;
            let nf = S::of_usize(cols);
            let mut d_x = if rg(*x) { Some(vec![S::zero(); xd.len()]) } else { None };
            let mut d_gamma = if rg(*gamma) { Some(vec![S::zero(); cols]) } else { None };
            let mut d_beta = if rg(*beta) { Some(vec![S::zero(); cols]) } else { None };
            let mut xhat = vec![S::zero(); cols];
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let xi = &xd[r * cols..(r + 1) * cols];
                let gi = &g[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    xhat[j] = (xi[j] - mean) * rstd;
                }
                if let Some(dg) = d_gamma.as_mut() {
                    for j in 0..cols {
                        dg[j] += gi[j] * xhat[j];
                    }
                }
                if let Some(db) = d_beta.as_mut() {
                    for j in 0..cols {
                        db[j] += gi[j];
                    }
                }
                if let Some(dx) = d_x.as_mut() {
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..cols {
                        let dxh = gi[j] * gd[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                    }
                    mean_dxhat /= nf;
                    mean_dxhat_xhat /= nf;
                    let out = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let dxh = gi[j] * gd[j];
                        out[j] += rstd * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            if let Some(dx) = d_x {
                add_into(&mut slots[*x], &dx);
            }
            if let Some(dg) = d_gamma {
                add_into(&mut slots[*gamma], &dg);
            }
            if let Some(db) = d_beta {
                add_into(&mut slots[*beta], &db);
            }
        }
        Op::CrossEntropy { logits, rows, targets, vocab } => {
            if rg(*logits) {
                let xd = Rc::clone(&nodes[*logits].data);
                let gs = g[0] / S::of_usize(rows.len());
                let gx = grad_buf(&mut slots[*logits], xd.len());
                for &r in rows {
                    let xi = &xd[r * vocab..(r + 1) * vocab];
                    let m = xi.iter().cloned().fold(S::neg_infinity(), S::max);
                    let denom = xi.iter().map(|&v| (v - m).exp()).sum::<S>();
                    let out = &mut gx[r * vocab..(r + 1) * vocab];
                    for j in 0..*vocab {
                        let p = (xi[j] - m).exp() / denom;
                        out[j] += gs * p;
                    }
                    out[targets[r]] -= gs;
                }
            }
        }
        Op::BceLogits { logits, rows, labels } => {
            if rg(*logits) {
                let xd = Rc::clone(&nodes[*logits].data);
                let gs = g[0] / S::of_usize(rows.len());
                let gx = grad_buf(&mut slots[*logits], xd.len());
                for &r in rows {
                    let y = if labels[r] { S::one() } else { S::zero() };
                    gx[r] += gs * (sigmoid(xd[r]) - y);
                }
            }
        }
        Op::Gather { table, rows, cols } => {
            if rg(*table) {
                let len = nodes[*table].data.len();
                let gt = grad_buf(&mut slots[*table], len);
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g[i * cols..(i + 1) * cols];
                    let dst = &mut gt[r * cols..(r + 1) * cols];
                    for (o, &gv) in dst.iter_mut().zip(src) {
                        *o += gv;
                    }
                }
            }
        }
        Op::Dropout { x, p, key } => {
            if rg(*x) {
                let scale = S::of_f64(1.0 / (1.0 - p));
                let gx = grad_buf(&mut slots[*x], g.len());
                for (i, (o, &gv)) in gx.iter_mut().zip(g).enumerate() {
                    if kept(*key, i as u64, *p) {
                        *o += gv * scale;
                    }
                }
            }
        }
        Op::AttentionBias { table, theta_q, theta_k, buckets, heads, seq, tupe } => {
            let bins = nodes[*table].shape[1];
            let (heads, seq) = (*heads, *seq);
            if rg(*table) {
                let gt = grad_buf(&mut slots[*table], heads * bins);
                for h in 0..heads {
                    for i in 0..seq {
                        if *tupe && i == 0 {
                            continue;
                        }
                        for j in 0..seq {
                            if *tupe && j == 0 {
                                continue;
                            }
                            let b = buckets[i * seq + j] as usize;
                            gt[h * bins + b] += g[(h * seq + i) * seq + j];
                        }
                    }
                }
            }
            if *tupe && rg(*theta_q) {
                let gq = grad_buf(&mut slots[*theta_q], heads);
                for h in 0..heads {
                    for j in 0..seq {
                        gq[h] += g[(h * seq) * seq + j];
                    }
                }
            }
            if *tupe && rg(*theta_k) {
                let gk = grad_buf(&mut slots[*theta_k], heads);
                for h in 0..heads {
                    for i in 1..seq {
                        gk[h] += g[(h * seq + i) * seq];
                    }
                }
            }
        }
        Op::ReduceSum(x) => {
            if rg(*x) {
                let len = nodes[*x].data.len();
                let gx = grad_buf(&mut slots[*x], len);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::ReduceMean(x) => {
            if rg(*x) {
                let len = nodes[*x].data.len();
                let gv = g[0] / S::of_usize(len);
                let gx = grad_buf(&mut slots[*x], len);
                for o in gx.iter_mut() {
                    *o += gv;
                }
            }
        }
    }
}
