//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Tape`] borrows a read-only [`ParameterStore`] and records every
//! forward op as a node. [`Tape::backward`] walks the nodes in reverse and
//! returns [`Gradients`] for every parameter reachable from the loss.
//!
//! Sequences are stored as rows: an `L x d` matrix holds one position per
//! row. Masks address "cells", i.e. all leading positions of a tensor whose
//! trailing axis is the channel axis (`[L, d]` has `L` cells, `[m, n, d]`
//! has `m * n`).
//!
//! Subgradient conventions: `relu'(0) = 0`; masked max routes the gradient
//! to the first maximal cell.

use rand::Rng;

use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
        skip_row0: bool,
    },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Row(Var, usize),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    CellMask {
        x: Var,
        mask: Vec<bool>,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
    },
    MaskedMax {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Dot(Var, Var),
    Bce {
        logit: Var,
        label: f64,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

fn cells(t: &Tensor) -> usize {
    if t.ndim() == 0 {
        1
    } else {
        t.len() / t.last_dim()
    }
}

fn check_mask(op: &'static str, t: &Tensor, mask: &[bool]) -> Result<()> {
    if t.ndim() == 0 || cells(t) != mask.len() {
        return Err(Error::shape(op, t.shape(), &[mask.len()]));
    }
    Ok(())
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) | Op::Gather { .. } => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.input(Tensor::zeros(shape))
    }

    /// Leaf for a whole parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id), &[]);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Rows `ids` of an embedding table as an `[ids.len(), d]` matrix.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.store.value(table);
        if t.ndim() != 2 {
            return Err(Error::shape("gather", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownId {
                    kind: "embedding row",
                    id,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let skip_row0 = self.store.has_padding_row(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                skip_row0,
            },
            &[],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ra = &ta.data()[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ra, &tb.data()[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.ndim() != 2 || tx.ndim() != 1 || tw.shape()[1] != tx.len() {
            return Err(Error::shape("matvec", tw.shape(), tx.shape()));
        }
        let (rows, cols) = (tw.shape()[0], tw.shape()[1]);
        let out = (0..rows)
            .map(|r| dot(&tw.data()[r * cols..(r + 1) * cols], tx.data()))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), &[w, x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[]));
        }
        let value = transpose(t);
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same length");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Elementwise sum of equally shaped operands.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Empty("add_n of zero operands".into()))?;
        let mut acc = self.value(*first).clone();
        for x in &xs[1..] {
            let t = self.value(*x);
            same_shape("add_n", &acc, t)?;
            acc.add_assign(t);
        }
        Ok(self.push(acc, Op::AddN(xs.to_vec()), xs))
    }

    /// `x · wᵀ + b` applied to a vector `[in]` or to each row of `[n, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.ndim() != 2 || tx.ndim() == 0 || tx.ndim() > 2 || tx.last_dim() != tw.shape()[1] {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (out_dim, in_dim) = (tw.shape()[0], tw.shape()[1]);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [out_dim] {
                return Err(Error::shape("linear bias", tw.shape(), tb.shape()));
            }
        }
        let rows = cells(tx);
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &tx.data()[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                out[r * out_dim + o] = dot(&tw.data()[o * in_dim..(o + 1) * in_dim], xr);
            }
        }
        if let Some(b) = b {
            let tb = self.value(b).data();
            for r in 0..rows {
                for o in 0..out_dim {
                    out[r * out_dim + o] += tb[o];
                }
            }
        }
        let shape = if tx.ndim() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let value = Tensor::new(shape, out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Concatenation along the last axis. Operands must agree on all
    /// leading axes.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(
            *xs.first()
                .ok_or_else(|| Error::Empty("concat of zero operands".into()))?,
        );
        let lead: Vec<usize> = first.shape()[..first.ndim().saturating_sub(1)].to_vec();
        let rows = cells(first);
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let t = self.value(*x);
            if t.ndim() == 0 || t.shape()[..t.ndim() - 1] != lead[..] {
                return Err(Error::shape("concat", first.shape(), t.shape()));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Stacks equally sized vectors into an `[n, c]` matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self
            .value(
                *xs.first()
                    .ok_or_else(|| Error::Empty("stack of zero operands".into()))?,
            )
            .len();
        let mut out = Vec::with_capacity(xs.len() * c);
        for x in xs {
            let t = self.value(*x);
            if t.ndim() != 1 || t.len() != c {
                return Err(Error::shape("stack", &[c], t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![xs.len(), c], out)?;
        Ok(self.push(value, Op::Stack(xs.to_vec()), xs))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || r >= t.shape()[0] {
            return Err(Error::shape("row", t.shape(), &[r]));
        }
        let value = Tensor::vector(t.row(r).to_vec());
        Ok(self.push(value, Op::Row(x, r), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same length");
        self.push(value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax along the last axis of every row; positions with
    /// `mask[j] == false` receive exactly zero weight. A row with no valid
    /// position is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 || t.last_dim() != mask.len() {
            return Err(Error::shape("masked_softmax", t.shape(), &[mask.len()]));
        }
        let c = mask.len();
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, mask, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Zeroes every cell whose mask entry is false.
    pub fn cell_mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        check_mask("cell_mask", t, mask)?;
        let c = t.last_dim();
        let mut out = t.data().to_vec();
        for (cell, keep) in out.chunks_mut(c).zip(mask) {
            if !keep {
                cell.fill(0.0);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::CellMask {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Per-channel mean over valid cells; zero vector when none is valid.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        check_mask("masked_mean", t, mask)?;
        let c = t.last_dim();
        let count = mask.iter().filter(|&&m| m).count();
        let mut out = vec![0.0; c];
        if count > 0 {
            for (cell, _) in t.data().chunks(c).zip(mask).filter(|(_, &m)| m) {
                for (o, v) in out.iter_mut().zip(cell) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= count as f64);
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Per-channel max over valid cells; zero vector when none is valid.
    pub fn masked_max(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        check_mask("masked_max", t, mask)?;
        let c = t.last_dim();
        let mut out = vec![0.0; c];
        let mut argmax = vec![None; c];
        for ch in 0..c {
            let mut best: Option<(usize, f64)> = None;
            for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let v = t.data()[cell * c + ch];
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((cell, v));
                }
            }
            if let Some((cell, v)) = best {
                out[ch] = v;
                argmax[ch] = Some(cell);
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaskedMax { x, argmax }, &[x]))
    }

    /// Same-padded 1-D convolution along rows.
    ///
    /// `x: [len, cin]`, `w: [width, cin, cout]`, `b: [cout]`. Output row `t`
    /// reads input rows `t - (width-1)/2 ..= t + width/2`, zeros outside.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 2 || tw.ndim() != 3 || tw.shape()[1] != tx.shape()[1] {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        let (len, cin) = (tx.shape()[0], tx.shape()[1]);
        let (width, cout) = (tw.shape()[0], tw.shape()[2]);
        if tb.shape() != [cout] {
            return Err(Error::shape("conv1d bias", tw.shape(), tb.shape()));
        }
        let pad = (width - 1) / 2;
        let mut out = vec![0.0; len * cout];
        for t in 0..len {
            let o = &mut out[t * cout..(t + 1) * cout];
            o.copy_from_slice(tb.data());
            for k in 0..width {
                let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                let xr = &tx.data()[src * cin..(src + 1) * cin];
                let wk = &tw.data()[k * cin * cout..(k + 1) * cin * cout];
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wk[ci * cout..(ci + 1) * cout];
                    for (ov, wv) in o.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![len, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Same-padded 2-D convolution, channels last.
    ///
    /// `x: [rows, cols, cin]`, `w: [kh, kw, cin, cout]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 3 || tw.ndim() != 4 || tw.shape()[2] != tx.shape()[2] {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        let (rows, cols, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (kh, kw, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[3]);
        if tb.shape() != [cout] {
            return Err(Error::shape("conv2d bias", tw.shape(), tb.shape()));
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = vec![0.0; rows * cols * cout];
        for r in 0..rows {
            for c in 0..cols {
                let o = &mut out[(r * cols + c) * cout..(r * cols + c + 1) * cout];
                o.copy_from_slice(tb.data());
                for i in 0..kh {
                    let Some(sr) = (r + i).checked_sub(ph).filter(|&s| s < rows) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(sc) = (c + j).checked_sub(pw).filter(|&s| s < cols) else {
                            continue;
                        };
                        let xr = &tx.data()[(sr * cols + sc) * cin..(sr * cols + sc + 1) * cin];
                        let wk = &tw.data()[(i * kw + j) * cin * cout..(i * kw + j + 1) * cin * cout];
                        for (ci, &xv) in xr.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wk[ci * cout..(ci + 1) * cout];
                            for (ov, wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, cols, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 1 || ta.shape() != tb.shape() {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let value = Tensor::scalar(dot(ta.data(), tb.data()));
        Ok(self.push(value, Op::Dot(a, b), &[a, b]))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against a 0/1 label, with the
    /// probability clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Result<Var> {
        let t = self.value(logit);
        if t.len() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        let y = sigmoid(t.item()).clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(label * y.ln() + (1.0 - label) * (1.0 - y).ln());
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logit, label }, &[logit]))
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let scale: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = t.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same length");
        self.push(value, Op::Dropout { x, scale }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut out = Gradients::new(self.store.len());
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.slot(*id, g.shape()).add_assign(g),
            Op::Gather {
                table,
                ids,
                skip_row0,
            } => {
                let shape = self.store.value(*table).shape();
                let d = shape[1];
                let slot = out.slot(*table, shape).data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    if *skip_row0 && id == 0 {
                        continue;
                    }
                    for (s, v) in slot[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *s += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let da = self.grad_mut(grads, *a);
                    for i in 0..n {
                        for kk in 0..k {
                            let brow = &tb.data()[kk * m..(kk + 1) * m];
                            da[i * k + kk] += dot(&gd[i * m..(i + 1) * m], brow);
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let db = self.grad_mut(grads, *b);
                    for i in 0..n {
                        for kk in 0..k {
                            let av = ta.data()[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[kk * m..(kk + 1) * m].iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.wants(*a) {
                    // dA = G · B
                    let da = self.grad_mut(grads, *a);
                    for i in 0..n {
                        for j in 0..m {
                            let gv = gd[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, bv) in da[i * k..(i + 1) * k].iter_mut().zip(&tb.data()[j * k..(j + 1) * k]) {
                                *d += gv * bv;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    let db = self.grad_mut(grads, *b);
                    for i in 0..n {
                        for j in 0..m {
                            let gv = gd[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(&ta.data()[i * k..(i + 1) * k]) {
                                *d += gv * av;
                            }
                        }
                    }
                }
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let cols = tw.shape()[1];
                if self.wants(*w) {
                    let dw = self.grad_mut(grads, *w);
                    for (r, gv) in gd.iter().enumerate() {
                        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(tx.data()) {
                            *d += gv * xv;
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = self.grad_mut(grads, *x);
                    for (r, gv) in gd.iter().enumerate() {
                        for (d, wv) in dx.iter_mut().zip(&tw.data()[r * cols..(r + 1) * cols]) {
                            *d += gv * wv;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let gt = transpose(g);
                    add_slice(self.grad_mut(grads, *x), gt.data());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_slice(self.grad_mut(grads, *v), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_slice(self.grad_mut(grads, *a), gd);
                }
                if self.wants(*b) {
                    for (d, gv) in self.grad_mut(grads, *b).iter_mut().zip(gd) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    for ((d, gv), bv) in self.grad_mut(grads, *a).iter_mut().zip(gd).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if self.wants(*b) {
                    for ((d, gv), av) in self.grad_mut(grads, *b).iter_mut().zip(gd).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    for (d, gv) in self.grad_mut(grads, *x).iter_mut().zip(gd) {
                        *d += gv * f;
                    }
                }
            }
            Op::AddN(xs) => {
                for x in xs {
                    if self.wants(*x) {
                        add_slice(self.grad_mut(grads, *x), gd);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = (tw.shape()[0], tw.shape()[1]);
                let rows = cells(tx);
                if self.wants(*x) {
                    let dx = self.grad_mut(grads, *x);
                    for r in 0..rows {
                        for o in 0..out_dim {
                            let gv = gd[r * out_dim + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, wv) in dx[r * in_dim..(r + 1) * in_dim]
                                .iter_mut()
                                .zip(&tw.data()[o * in_dim..(o + 1) * in_dim])
                            {
                                *d += gv * wv;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = self.grad_mut(grads, *w);
                    for r in 0..rows {
                        let xr = &tx.data()[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let gv = gd[r * out_dim + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = self.grad_mut(grads, *b);
                        for r in 0..rows {
                            add_slice(db, &gd[r * out_dim..(r + 1) * out_dim]);
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let rows = cells(g);
                let total = g.last_dim();
                let mut offset = 0;
                for x in xs {
                    let w = self.value(*x).last_dim();
                    if self.wants(*x) {
                        let dx = self.grad_mut(grads, *x);
                        for r in 0..rows {
                            add_slice(
                                &mut dx[r * w..(r + 1) * w],
                                &gd[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Stack(xs) => {
                let c = g.last_dim();
                for (r, x) in xs.iter().enumerate() {
                    if self.wants(*x) {
                        add_slice(self.grad_mut(grads, *x), &gd[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Row(x, r) => {
                if self.wants(*x) {
                    let c = gd.len();
                    add_slice(&mut self.grad_mut(grads, *x)[r * c..(r + 1) * c], gd);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_slice(self.grad_mut(grads, *x), gd);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    for ((d, gv), yv) in self.grad_mut(grads, *x).iter_mut().zip(gd).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    for ((d, gv), yv) in self.grad_mut(grads, *x).iter_mut().zip(gd).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    for ((d, gv), v) in self.grad_mut(grads, *x).iter_mut().zip(gd).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                if self.wants(*x) {
                    let c = mask.len();
                    let y = node.value.data();
                    let dx = self.grad_mut(grads, *x);
                    for ((yr, gr), dr) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            if mask[j] {
                                dr[j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                }
            }
            Op::CellMask { x, mask } => {
                if self.wants(*x) {
                    let c = g.last_dim();
                    let dx = self.grad_mut(grads, *x);
                    for ((dr, gr), keep) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(mask) {
                        if *keep {
                            add_slice(dr, gr);
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask } => {
                if self.wants(*x) {
                    let count = mask.iter().filter(|&&m| m).count();
                    if count > 0 {
                        let c = gd.len();
                        let inv = 1.0 / count as f64;
                        let dx = self.grad_mut(grads, *x);
                        for (dr, keep) in dx.chunks_mut(c).zip(mask) {
                            if *keep {
                                for (d, gv) in dr.iter_mut().zip(gd) {
                                    *d += gv * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedMax { x, argmax } => {
                if self.wants(*x) {
                    let c = gd.len();
                    let dx = self.grad_mut(grads, *x);
                    for (ch, cell) in argmax.iter().enumerate() {
                        if let Some(cell) = cell {
                            dx[cell * c + ch] += gd[ch];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, gd, grads),
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, gd, grads),
            Op::Dot(a, b) => {
                let gv = gd[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    for (d, bv) in self.grad_mut(grads, *a).iter_mut().zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if self.wants(*b) {
                    for (d, av) in self.grad_mut(grads, *b).iter_mut().zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Bce { logit, label } => {
                if self.wants(*logit) {
                    let raw = sigmoid(self.value(*logit).item());
                    let clamped = !(BCE_EPS..=1.0 - BCE_EPS).contains(&raw);
                    if !clamped {
                        self.grad_mut(grads, *logit)[0] += gd[0] * (raw - label);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if self.wants(*x) {
                    for ((d, gv), s) in self.grad_mut(grads, *x).iter_mut().zip(gd).zip(scale) {
                        *d += gv * s;
                    }
                }
            }
        }
    }

    fn conv1d_backward(&self, x: Var, w: Var, b: Var, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (len, cin) = (tx.shape()[0], tx.shape()[1]);
        let (width, cout) = (tw.shape()[0], tw.shape()[2]);
        let pad = (width - 1) / 2;
        if self.wants(b) {
            let db = self.grad_mut(grads, b);
            for t in 0..len {
                add_slice(db, &gd[t * cout..(t + 1) * cout]);
            }
        }
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        for t in 0..len {
            let go = &gd[t * cout..(t + 1) * cout];
            for k in 0..width {
                let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                if want_w {
                    let dw = self.grad_mut(grads, w);
                    for ci in 0..cin {
                        let xv = tx.data()[src * cin + ci];
                        let base = (k * cin + ci) * cout;
                        for (d, gv) in dw[base..base + cout].iter_mut().zip(go) {
                            *d += xv * gv;
                        }
                    }
                }
                if want_x {
                    let dx = self.grad_mut(grads, x);
                    for ci in 0..cin {
                        let base = (k * cin + ci) * cout;
                        dx[src * cin + ci] += dot(&tw.data()[base..base + cout], go);
                    }
                }
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, cols, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (kh, kw, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[3]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        if self.wants(b) {
            let db = self.grad_mut(grads, b);
            for cell in 0..rows * cols {
                add_slice(db, &gd[cell * cout..(cell + 1) * cout]);
            }
        }
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        for r in 0..rows {
            for c in 0..cols {
                let go = &gd[(r * cols + c) * cout..(r * cols + c + 1) * cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for i in 0..kh {
                    let Some(sr) = (r + i).checked_sub(ph).filter(|&s| s < rows) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(sc) = (c + j).checked_sub(pw).filter(|&s| s < cols) else {
                            continue;
                        };
                        let src = sr * cols + sc;
                        if want_w {
                            let dw = self.grad_mut(grads, w);
                            for ci in 0..cin {
                                let xv = tx.data()[src * cin + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let base = ((i * kw + j) * cin + ci) * cout;
                                for (d, gv) in dw[base..base + cout].iter_mut().zip(go) {
                                    *d += xv * gv;
                                }
                            }
                        }
                        if want_x {
                            let dx = self.grad_mut(grads, x);
                            for ci in 0..cin {
                                let base = ((i * kw + j) * cin + ci) * cout;
                                dx[src * cin + ci] += dot(&tw.data()[base..base + cout], go);
                            }
                        }
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_mut<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose preserves size")
}

pub(crate) fn softmax_row(src: &[f64], mask: &[bool], dst: &mut [f64]) {
    let max = src
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        dst.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for ((d, &v), &m) in dst.iter_mut().zip(src).zip(mask) {
        *d = if m { (v - max).exp() } else { 0.0 };
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}
