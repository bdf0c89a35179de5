//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, appends a node holding its value, and
//! records enough of its inputs to run the backward pass. Activations are
//! laid out as `[rows, cols]` matrices; attention operates on
//! `[batch * len, model_dim]` blocks described by an [`AttentionMask`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_row, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query may attend to, per batch element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, query_len: usize, key_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * query_len * key_len {
            return Err(Error::Shape(format!(
                "attention mask of {} entries for batch {batch} x {query_len} x {key_len}",
                allowed.len()
            )));
        }
        Ok(AttentionMask {
            batch,
            query_len,
            key_len,
            allowed,
        })
    }

    /// Keys `j < key_lens[b]` are visible; with `causal`, additionally only
    /// `j <= i`.
    pub fn padded(key_lens: &[usize], query_len: usize, key_len: usize, causal: bool) -> Self {
        let batch = key_lens.len();
        let mut allowed = Vec::with_capacity(batch * query_len * key_len);
        for &len in key_lens {
            for i in 0..query_len {
                for j in 0..key_len {
                    allowed.push(j < len && (!causal || j <= i));
                }
            }
        }
        AttentionMask {
            batch,
            query_len,
            key_len,
            allowed,
        }
    }

    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.query_len + i) * self.key_len + j]
    }

    fn row(&self, b: usize, i: usize) -> &[bool] {
        let start = (b * self.query_len + i) * self.key_len;
        &self.allowed[start..start + self.key_len]
    }
}

/// Per-row description of the copy distribution: for batch element `b`,
/// source position `j` contributes to output column `map[b * key_len + j]`.
#[derive(Clone, Debug)]
pub struct CopyMap {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub width: usize,
    pub map: Vec<Option<usize>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    AttnScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: T,
        mask: AttentionMask,
    },
    AttnApply {
        p: Var,
        v: Var,
        heads: usize,
        batch: usize,
        query_len: usize,
        key_len: usize,
    },
    HeadMean {
        p: Var,
        heads: usize,
    },
    CopyMix {
        vocab: Var,
        gate: Var,
        attn: Var,
        copy: CopyMap,
        norm: Vec<T>,
    },
    Nll {
        probs: Var,
        targets: Vec<Option<usize>>,
        support: Vec<bool>,
        smoothing: T,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Floor for the log in the smoothing term of `nll`.
fn log_floor<T: Scalar>() -> T {
    T::of(1e-30)
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Name of the first operation whose output contained NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).rows_cols()
    }

    /// Input or parameter leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), "matmul"))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        Ok(self.push(value, Op::Add(a, b), "add"))
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(shape_err("add_row", self.value(a).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self.value(a).data().chunks(n).flat_map(|r| r.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        Ok(self.push(value, Op::AddRow(a, bias), "add_row"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        Ok(self.push(value, Op::Mul(a, b), "mul"))
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.value(a).shape(), &[c.len()]));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        Ok(self.push(value, Op::MulConst(a, c), "mul_const"))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Affine(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), "reshape"))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for row in self.value(x).data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm"))
    }

    /// Rows `ids` of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("embedding id {bad} out of range {v}")));
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::from_vec(&[ids.len(), d], data);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, "embedding"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows || self.value(p).shape().len() != 2) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_vec(&[rows, total], data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols"))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::Shape(format!("gather_rows: index out of range {m}")));
        }
        let data = rows.iter().flat_map(|&r| self.value(a).row(r).iter().copied()).collect();
        let value = Tensor::from_vec(&[rows.len(), n], data);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), "gather_rows"))
    }

    /// Softmax over the last axis; columns with `allowed[j] == false` get
    /// exactly zero probability.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (_, n) = self.dims(a);
        if allowed.is_some_and(|m| m.len() != n) {
            return Err(Error::Shape("softmax: column mask length".into()));
        }
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_row(row, allowed);
        }
        Ok(self.push(value, Op::Softmax(a), "softmax"))
    }

    /// Scaled dot-product attention weights per head, shaped
    /// `[batch, heads, query_len, key_len]`. Masked keys get zero weight.
    pub fn attention_weights(&mut self, q: Var, k: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let (qr, d) = self.dims(q);
        let (kr, d2) = self.dims(k);
        let (b, tq, tk) = (mask.batch, mask.query_len, mask.key_len);
        if d != d2 || qr != b * tq || kr != b * tk {
            return Err(shape_err("attention_weights", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible into {heads} heads")));
        }
        let dk = d / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut p = vec![T::zero(); b * heads * tq * tk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let out = &mut p[((bi * heads + h) * tq + i) * tk..][..tk];
                    let qrow = &qd[(bi * tq + i) * d + h * dk..][..dk];
                    for (j, o) in out.iter_mut().enumerate() {
                        let krow = &kd[(bi * tk + j) * d + h * dk..][..dk];
                        *o = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    }
                    softmax_row(out, Some(mask.row(bi, i)));
                }
            }
        }
        let value = Tensor::from_vec(&[b, heads, tq, tk], p);
        let op = Op::AttnScores {
            q,
            k,
            heads,
            scale,
            mask: mask.clone(),
        };
        Ok(self.push(value, op, "attention_weights"))
    }

    /// Applies `[batch, heads, tq, tk]` weights to `[batch * tk, dim]`
    /// values, producing `[batch * tq, dim]` with heads concatenated.
    pub fn attention_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        let ps = self.value(p).shape().to_vec();
        let (vr, d) = self.dims(v);
        if ps.len() != 4 || vr != ps[0] * ps[3] || d % ps[1] != 0 {
            return Err(shape_err("attention_apply", &ps, self.value(v).shape()));
        }
        let (b, heads, tq, tk) = (ps[0], ps[1], ps[2], ps[3]);
        let dk = d / heads;
        let (pd, vd) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![T::zero(); b * tq * d];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let w = &pd[((bi * heads + h) * tq + i) * tk..][..tk];
                    let o = &mut out[(bi * tq + i) * d + h * dk..][..dk];
                    for (j, &wj) in w.iter().enumerate() {
                        if wj == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(bi * tk + j) * d + h * dk..][..dk];
                        for (x, &y) in o.iter_mut().zip(vrow) {
                            *x += wj * y;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b * tq, d], out);
        let op = Op::AttnApply {
            p,
            v,
            heads,
            batch: b,
            query_len: tq,
            key_len: tk,
        };
        Ok(self.push(value, op, "attention_apply"))
    }

    /// Mean over heads of `[batch, heads, tq, tk]` weights, as `[batch * tq, tk]`.
    pub fn head_mean(&mut self, p: Var) -> Result<Var> {
        let ps = self.value(p).shape().to_vec();
        if ps.len() != 4 {
            return Err(Error::Shape(format!("head_mean on {ps:?}")));
        }
        let (b, heads, tq, tk) = (ps[0], ps[1], ps[2], ps[3]);
        let inv = T::one() / T::from_usize(heads).unwrap();
        let pd = self.value(p).data();
        let mut out = vec![T::zero(); b * tq * tk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let src = &pd[((bi * heads + h) * tq + i) * tk..][..tk];
                    let dst = &mut out[(bi * tq + i) * tk..][..tk];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += s * inv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b * tq, tk], out);
        Ok(self.push(value, Op::HeadMean { p, heads }, "head_mean"))
    }

    /// Mixes a generation distribution with a copy distribution:
    /// `P(c) = g * P_vocab(c) + (1 - g) * P_copy(c)`, where `P_copy(c)` is
    /// the attention mass on source positions mapped to column `c`,
    /// renormalized over the mapped positions.
    ///
    /// `vocab` is `[rows, base]`, `gate` is `[rows, 1]`, `attn` is
    /// `[rows, key_len]`; the output is `[rows, copy.width]`.
    pub fn copy_mix(&mut self, vocab: Var, gate: Var, attn: Var, copy: &CopyMap) -> Result<Var> {
        let (rows, base) = self.dims(vocab);
        let (grows, gcols) = self.dims(gate);
        let (arows, tk) = self.dims(attn);
        if grows != rows
            || gcols != 1
            || arows != rows
            || tk != copy.key_len
            || rows != copy.batch * copy.query_len
            || copy.width < base
            || copy.map.len() != copy.batch * tk
            || copy.map.iter().flatten().any(|&c| c >= copy.width)
        {
            return Err(shape_err("copy_mix", self.value(vocab).shape(), self.value(attn).shape()));
        }
        let width = copy.width;
        let (pv, g, a) = (self.value(vocab).data(), self.value(gate).data(), self.value(attn).data());
        let mut out = vec![T::zero(); rows * width];
        let mut norm = vec![T::zero(); rows];
        for r in 0..rows {
            let b = r / copy.query_len;
            let map = &copy.map[b * tk..][..tk];
            let arow = &a[r * tk..][..tk];
            let z: T = map.iter().zip(arow).filter(|(m, _)| m.is_some()).map(|(_, &w)| w).sum();
            norm[r] = z;
            let o = &mut out[r * width..][..width];
            // With no copyable mass the row falls back to the generator.
            let gen = if z > T::zero() { g[r] } else { T::one() };
            for (x, &p) in o.iter_mut().zip(&pv[r * base..][..base]) {
                *x = gen * p;
            }
            if z > T::zero() {
                let cw = (T::one() - gen) / z;
                for (m, &w) in map.iter().zip(arow) {
                    if let Some(c) = m {
                        o[*c] += cw * w;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[rows, width], out);
        let op = Op::CopyMix {
            vocab,
            gate,
            attn,
            copy: copy.clone(),
            norm,
        };
        Ok(self.push(value, op, "copy_mix"))
    }

    /// Mean negative log-likelihood of `targets` under row distributions
    /// `probs`, with optional label smoothing spread uniformly over each
    /// row's `support` columns. Rows with `None` targets are ignored.
    pub fn nll(&mut self, probs: Var, targets: &[Option<usize>], support: Vec<bool>, smoothing: T) -> Result<Var> {
        let (rows, width) = self.dims(probs);
        if targets.len() != rows || support.len() != rows * width {
            return Err(Error::Shape(format!(
                "nll: {rows}x{width} probabilities, {} targets, {} support flags",
                targets.len(),
                support.len()
            )));
        }
        if targets.iter().flatten().any(|&t| t >= width) {
            return Err(Error::Shape("nll: target index out of range".into()));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let p = self.value(probs).data();
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &p[r * width..][..width];
            total -= (T::one() - smoothing) * row[t].ln();
            if smoothing > T::zero() {
                let sup = &support[r * width..][..width];
                let n = sup.iter().filter(|&&s| s).count();
                let s: T = row.iter().zip(sup).filter(|(_, &s)| s).map(|(&v, _)| v.max(log_floor()).ln()).sum();
                total -= smoothing * s / T::from_usize(n.max(1)).unwrap();
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        let op = Op::Nll {
            probs,
            targets: targets.to_vec(),
            support,
            smoothing,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, "nll"))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            self.backprop_node(i, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_vec(n.value.shape(), g)))
                .collect(),
        })
    }

    fn backprop_node(&self, i: usize, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let ga = grad_buf(grads, *a, m * k);
                gemm(m, n, k, dout, false, val(*b), true, ga, true);
                let gb = grad_buf(grads, *b, k * n);
                gemm(k, m, n, val(*a), true, dout, false, gb, true);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let g = grad_buf(grads, v, dout.len());
                    g.iter_mut().zip(dout).for_each(|(x, &d)| *x += d);
                }
            }
            Op::AddRow(a, bias) => {
                let g = grad_buf(grads, *a, dout.len());
                g.iter_mut().zip(dout).for_each(|(x, &d)| *x += d);
                let n = self.value(*bias).len();
                let gb = grad_buf(grads, *bias, n);
                for row in dout.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = grad_buf(grads, *a, dout.len());
                for ((x, &d), &y) in ga.iter_mut().zip(dout).zip(bv) {
                    *x += d * y;
                }
                let gb = grad_buf(grads, *b, dout.len());
                for ((x, &d), &y) in gb.iter_mut().zip(dout).zip(av) {
                    *x += d * y;
                }
            }
            Op::MulConst(a, c) => {
                let g = grad_buf(grads, *a, dout.len());
                for ((x, &d), &y) in g.iter_mut().zip(dout).zip(c) {
                    *x += d * y;
                }
            }
            Op::Affine(a, s) => {
                let g = grad_buf(grads, *a, dout.len());
                g.iter_mut().zip(dout).for_each(|(x, &d)| *x += d * *s);
            }
            Op::Relu(a) => {
                let av = val(*a);
                let g = grad_buf(grads, *a, dout.len());
                for ((x, &d), &v) in g.iter_mut().zip(dout).zip(av) {
                    if v > T::zero() {
                        *x += d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let g = grad_buf(grads, *a, dout.len());
                for ((x, &d), &s) in g.iter_mut().zip(dout).zip(y) {
                    *x += d * s * (T::one() - s);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let g = grad_buf(grads, *a, n);
                g.iter_mut().for_each(|x| *x += dout[0]);
            }
            Op::Reshape(a) => {
                let g = grad_buf(grads, *a, dout.len());
                g.iter_mut().zip(dout).for_each(|(x, &d)| *x += d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*gain).len();
                let gv = val(*gain);
                {
                    let gg = grad_buf(grads, *gain, n);
                    for (row, hrow) in dout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                {
                    let gb = grad_buf(grads, *bias, n);
                    for row in dout.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                    }
                }
                let nf = T::from_usize(n).unwrap();
                let gx = grad_buf(grads, *x, dout.len());
                for (r, (row, hrow)) in dout.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let dh: Vec<T> = row.iter().zip(gv).map(|(&d, &g)| d * g).collect();
                    let mean_dh = dh.iter().copied().sum::<T>() / nf;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        gx[r * n + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.dims(*table);
                let g = grad_buf(grads, *table, v * d);
                for (row, &id) in dout.chunks(d).zip(ids) {
                    g[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let g = grad_buf(grads, p, rows * w);
                    for r in 0..rows {
                        g[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&dout[r * total + offset..r * total + offset + w])
                            .for_each(|(x, &y)| *x += y);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let (m, n) = self.dims(*a);
                let g = grad_buf(grads, *a, m * n);
                for (row, &r) in dout.chunks(n).zip(rows) {
                    g[r * n..(r + 1) * n].iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Softmax(a) => {
                let n = node.value.rows_cols().1;
                let p = node.value.data();
                let g = grad_buf(grads, *a, dout.len());
                for ((grow, drow), prow) in g.chunks_mut(n).zip(dout.chunks(n)).zip(p.chunks(n)) {
                    let dot: T = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                    for j in 0..n {
                        grow[j] += prow[j] * (drow[j] - dot);
                    }
                }
            }
            Op::AttnScores { q, k, heads, scale, mask } => {
                let d = self.dims(*q).1;
                let dk = d / heads;
                let (b, tq, tk) = (mask.batch, mask.query_len, mask.key_len);
                let p = node.value.data();
                let (qd, kd) = (val(*q), val(*k));
                let mut gq = vec![T::zero(); b * tq * d];
                let mut gk = vec![T::zero(); b * tk * d];
                let mut ds = vec![T::zero(); tk];
                for bi in 0..b {
                    for h in 0..*heads {
                        for i in 0..tq {
                            let off = ((bi * heads + h) * tq + i) * tk;
                            let (prow, drow) = (&p[off..off + tk], &dout[off..off + tk]);
                            let dot: T = prow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                            for j in 0..tk {
                                ds[j] = prow[j] * (drow[j] - dot) * *scale;
                            }
                            let qo = (bi * tq + i) * d + h * dk;
                            for (j, &s) in ds.iter().enumerate() {
                                if s == T::zero() {
                                    continue;
                                }
                                let ko = (bi * tk + j) * d + h * dk;
                                for e in 0..dk {
                                    gq[qo + e] += s * kd[ko + e];
                                    gk[ko + e] += s * qd[qo + e];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *q, &gq);
                accumulate(grads, *k, &gk);
            }
            Op::AttnApply {
                p,
                v,
                heads,
                batch,
                query_len,
                key_len,
            } => {
                let (b, tq, tk) = (*batch, *query_len, *key_len);
                let d = self.dims(*v).1;
                let dk = d / heads;
                let (pd, vd) = (val(*p), val(*v));
                let mut gp = vec![T::zero(); pd.len()];
                let mut gv = vec![T::zero(); vd.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for i in 0..tq {
                            let off = ((bi * heads + h) * tq + i) * tk;
                            let dorow = &dout[(bi * tq + i) * d + h * dk..][..dk];
                            for j in 0..tk {
                                let vo = (bi * tk + j) * d + h * dk;
                                let vrow = &vd[vo..vo + dk];
                                gp[off + j] = dorow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                                let w = pd[off + j];
                                if w != T::zero() {
                                    for e in 0..dk {
                                        gv[vo + e] += w * dorow[e];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *p, &gp);
                accumulate(grads, *v, &gv);
            }
            Op::HeadMean { p, heads } => {
                let ps = self.value(*p).shape();
                let (b, tq, tk) = (ps[0], ps[2], ps[3]);
                let inv = T::one() / T::from_usize(*heads).unwrap();
                let g = grad_buf(grads, *p, b * heads * tq * tk);
                for bi in 0..b {
                    for h in 0..*heads {
                        for i in 0..tq {
                            let dst = &mut g[((bi * heads + h) * tq + i) * tk..][..tk];
                            let src = &dout[(bi * tq + i) * tk..][..tk];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y * inv);
                        }
                    }
                }
            }
            Op::CopyMix {
                vocab,
                gate,
                attn,
                copy,
                norm,
            } => {
                let (rows, base) = self.dims(*vocab);
                let tk = copy.key_len;
                let width = copy.width;
                let (pv, g, a) = (val(*vocab), val(*gate), val(*attn));
                let mut gpv = vec![T::zero(); rows * base];
                let mut gg = vec![T::zero(); rows];
                let mut ga = vec![T::zero(); rows * tk];
                for r in 0..rows {
                    let drow = &dout[r * width..][..width];
                    let z = norm[r];
                    let gen = if z > T::zero() { g[r] } else { T::one() };
                    let pvrow = &pv[r * base..][..base];
                    let vocab_dot: T = pvrow.iter().zip(drow).map(|(&p, &d)| p * d).sum();
                    for j in 0..base {
                        gpv[r * base + j] = gen * drow[j];
                    }
                    if z > T::zero() {
                        let b = r / copy.query_len;
                        let map = &copy.map[b * tk..][..tk];
                        let arow = &a[r * tk..][..tk];
                        let copy_dot: T = map
                            .iter()
                            .zip(arow)
                            .filter_map(|(m, &w)| m.map(|c| w * drow[c]))
                            .sum::<T>()
                            / z;
                        gg[r] = vocab_dot - copy_dot;
                        let coef = (T::one() - gen) / z;
                        for (j, m) in map.iter().enumerate() {
                            if let Some(c) = m {
                                ga[r * tk + j] = coef * (drow[*c] - copy_dot);
                            }
                        }
                    }
                }
                accumulate(grads, *vocab, &gpv);
                accumulate(grads, *gate, &gg);
                accumulate(grads, *attn, &ga);
            }
            Op::Nll {
                probs,
                targets,
                support,
                smoothing,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (_, width) = self.dims(*probs);
                let p = val(*probs);
                let scale = dout[0] / T::from_usize(*count).unwrap();
                let g = grad_buf(grads, *probs, p.len());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let off = r * width;
                    g[off + t] -= scale * (T::one() - *smoothing) / p[off + t];
                    if *smoothing > T::zero() {
                        let sup = &support[off..off + width];
                        let n = T::from_usize(sup.iter().filter(|&&s| s).count().max(1)).unwrap();
                        for j in 0..width {
                            if sup[j] && p[off + j] > log_floor() {
                                g[off + j] -= scale * *smoothing / (n * p[off + j]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
        slot => *slot = Some(g.to_vec()),
    }
}

/// Gradients of a scalar with respect to every node that influenced it.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unrelated_parameter_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let p = g.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.wrt(p, g.value(p)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_identity_single_position() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_vec(&[1, 2], vec![0.3, -0.1]));
        let v = g.leaf(Tensor::from_vec(&[1, 2], vec![5.0, 7.0]));
        let mask = AttentionMask::padded(&[1], 1, 1, false);
        let p = g.attention_weights(q, q, 1, &mask).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);
        let o = g.attention_apply(p, v).unwrap();
        assert_eq!(g.value(o).data(), &[5.0, 7.0]);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_vec(&[3, 4], lcg(12, 1)));
        let k = g.leaf(Tensor::from_vec(&[3, 4], lcg(12, 2)));
        let mask = AttentionMask::new(1, 3, 3, vec![true; 9].into_iter().enumerate().map(|(i, _)| i % 3 == 1).collect()).unwrap();
        let p = g.attention_weights(q, k, 2, &mask).unwrap();
        for row in g.value(p).data().chunks(3) {
            assert_eq!(row, &[0.0, 1.0, 0.0]);
        }
        assert!(matches!(g.attention_weights(q, k, 3, &mask), Err(Error::Config(_))));
    }

    #[test]
    fn copy_mix_is_a_distribution() {
        let mut g = Graph::<f64>::new();
        let pv = g.leaf(Tensor::from_vec(&[1, 3], vec![0.2, 0.3, 0.5]));
        let gate = g.leaf(Tensor::from_vec(&[1, 1], vec![0.25]));
        let attn = g.leaf(Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]));
        let copy = CopyMap {
            batch: 1,
            query_len: 1,
            key_len: 4,
            width: 4,
            map: vec![None, Some(1), Some(3), Some(1)],
        };
        let out = g.copy_mix(pv, gate, attn, &copy).unwrap();
        let o = g.value(out).data();
        let z = 0.9;
        let expect = [0.25 * 0.2, 0.25 * 0.3 + 0.75 * 0.6 / z, 0.25 * 0.5, 0.75 * 0.3 / z];
        for (a, b) in o.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
