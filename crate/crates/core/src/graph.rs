//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op evaluates eagerly when recorded. `backward` walks the tape in
//! reverse, so a network unrolled over time steps is differentiated by plain
//! backpropagation through time. Spike nonlinearities record the membrane
//! potential and substitute the arctangent surrogate derivative.

use crate::error::{Error, Result};
use crate::neurons::{surrogate_forward_scalar, surrogate_grad_scalar};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Spike { u: Var, thr: f64, alpha: f64 },
    Ternary { u: Var, amp: f64, alpha: f64 },
    Relu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    MaskedSoftmax(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    SoftKl { logits: Var, teacher: Tensor, student: Tensor, tau: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Values are owned by the tape; [`Var`] handles index into it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Graph::backward`], keyed by parameter id.
#[derive(Debug, Default)]
pub struct ParamGrads {
    pub entries: Vec<(usize, Tensor)>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; gradients are reported under `id`.
    pub fn param(&mut self, id: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(id), true)
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = broadcast_rows(self.value(a), self.value(row), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = broadcast_rows(self.value(a), self.value(row), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::MulRow(a, row), ng))
    }

    /// `x · w + b` with `w: [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Validation(format!(
                    "row index {i} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(&[ids.len(), cols], data)?;
        let ng = self.ng(table);
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start + width > cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} exceeds {cols} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let t = Tensor::new(&[rows, width], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat row mismatch: {} vs {}",
                    pv.rows(),
                    rows
                )));
            }
            let w = pv.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let t = Tensor::new(&[rows, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Heaviside spike `1[u ≥ thr]` (or its arctangent relaxation when
    /// `relaxed`), differentiated with the arctangent surrogate.
    pub fn spike(&mut self, u: Var, thr: f64, alpha: f64, relaxed: bool) -> Var {
        let t = if relaxed {
            self.value(u).map(|x| surrogate_forward_scalar(x - thr, alpha))
        } else {
            self.value(u).map(|x| if x >= thr { 1.0 } else { 0.0 })
        };
        let ng = self.ng(u);
        self.push(t, Op::Spike { u, thr, alpha }, ng)
    }

    /// Three-level spike in `{−amp, 0, +amp}`.
    pub fn ternary_spike(&mut self, u: Var, amp: f64, alpha: f64, relaxed: bool) -> Var {
        let t = if relaxed {
            self.value(u).map(|x| {
                amp * (surrogate_forward_scalar(x - amp, alpha)
                    - surrogate_forward_scalar(-x - amp, alpha))
            })
        } else {
            self.value(u).map(|x| crate::neurons::ternary_level(x, amp))
        };
        let ng = self.ng(u);
        self.push(t, Op::Ternary { u, amp, alpha }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let t = Tensor::new(xv.shape(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, rstd }, ng)
    }

    /// Row softmax restricted to entries where `mask` is 1; masked entries get
    /// probability 0. A row with no allowed entry attends fully to its
    /// diagonal element.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.check_same_shape(mask)?;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let m = mask.row(r);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &mk)| mk != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            if max == f64::NEG_INFINITY {
                o[r.min(cols - 1)] = 1.0;
                continue;
            }
            let mut z = 0.0;
            for j in 0..cols {
                if m[j] != 0.0 {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|p| *p /= z);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaskedSoftmax(x), ng))
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(t, Op::Mean(x), ng)
    }

    /// Element-averaged squared error between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Weighted sum of rank-0 nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, s)?,
                None => s,
            });
        }
        acc.ok_or_else(|| Error::Internal("empty weighted sum".into()))
    }

    /// Mean of equally shaped nodes.
    pub fn average(&mut self, parts: &[Var]) -> Result<Var> {
        let w = 1.0 / parts.len() as f64;
        let terms: Vec<_> = parts.iter().map(|&p| (w, p)).collect();
        self.weighted_sum(&terms)
    }

    /// Mean token-level cross-entropy of `logits: [L, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {} logit rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Validation(format!(
                "target id {bad} out of range for vocabulary of {cols}"
            )));
        }
        let probs = softmax_rows(lv, 1.0);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -log_softmax_at(lv.row(r), t))
            .sum::<f64>()
            / rows as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// `τ²·KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`, averaged over rows, with the
    /// teacher logits held constant.
    pub fn soft_kl(&mut self, teacher_logits: &Tensor, logits: Var, tau: f64) -> Result<Var> {
        let lv = self.value(logits);
        lv.check_same_shape(teacher_logits)?;
        let p = softmax_rows(teacher_logits, tau);
        let q = softmax_rows(lv, tau);
        let rows = lv.rows();
        let mut kl = 0.0;
        for r in 0..rows {
            let lq: Vec<f64> = log_softmax_row(lv.row(r), tau);
            let lp: Vec<f64> = log_softmax_row(teacher_logits.row(r), tau);
            for j in 0..lv.cols() {
                let pj = p.get2(r, j);
                if pj > 0.0 {
                    kl += pj * (lp[j] - lq[j]);
                }
            }
        }
        let loss = (tau * tau * kl / rows as f64).max(0.0);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftKl { logits, teacher: p, student: q, tau },
            ng,
        ))
    }

    /// Backpropagates from the rank-0 node `loss` and returns gradients of
    /// every parameter leaf that influenced it.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Internal("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = ParamGrads::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut ParamGrads,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.entries.push((*id, g)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul_bt(bv)?);
                }
                if self.ng(*b) {
                    acc(*b, av.matmul_at(&g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul(bv)?);
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_at(av)?);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    acc(*b, g.scale(-1.0));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.mul(self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g),
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    acc(*row, column_sums(&g, self.value(*row).shape()));
                }
                acc(*a, g);
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.ng(*row) {
                    let prod = g.mul(self.value(*a))?;
                    acc(*row, column_sums(&prod, rv.shape()));
                }
                if self.ng(*a) {
                    acc(*a, broadcast_rows(&g, rv, |x, y| x * y)?);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[i * cols..(i + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                acc(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols, w) = (xv.rows(), xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + start + w]
                        .copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(pv.shape());
                        for r in 0..pv.rows() {
                            dp.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, dp);
                    }
                    off += w;
                }
            }
            Op::Spike { u, thr, alpha } => {
                let d = self
                    .value(*u)
                    .zip_map(&g, |x, gv| gv * surrogate_grad_scalar(x - thr, *alpha))?;
                acc(*u, d);
            }
            Op::Ternary { u, amp, alpha } => {
                let d = self.value(*u).zip_map(&g, |x, gv| {
                    gv * amp
                        * (surrogate_grad_scalar(x - amp, *alpha)
                            + surrogate_grad_scalar(x + amp, *alpha))
                })?;
                acc(*u, d);
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(&g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                acc(*x, d);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dst[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(*x, dx);
            }
            Op::MaskedSoftmax(x) => {
                let p = &node.value;
                let (rows, cols) = (p.rows(), p.cols());
                let mut dx = Tensor::zeros(p.shape());
                for r in 0..rows {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dotp: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dst[j] = pr[j] * (gr[j] - dotp);
                    }
                }
                acc(*x, dx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                acc(*x, Tensor::full(xv.shape(), g.item() / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let c = d.cols();
                    d.data_mut()[r * c + t] -= 1.0;
                }
                acc(*logits, d.scale(g.item() / n));
            }
            Op::SoftKl { logits, teacher, student, tau } => {
                let n = student.rows() as f64;
                let d = student.sub(teacher)?.scale(g.item() * tau / n);
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let cols = a.cols();
    if row.len() != cols {
        return Err(Error::Dimension(format!(
            "row broadcast of {:?} onto {:?}",
            row.shape(),
            a.shape()
        )));
    }
    let r = row.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, r[i % cols])).collect();
    Tensor::new(a.shape(), data)
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("column sum shape")
}

fn log_softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let lse = max + row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v / tau - lse).collect()
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

/// Row-wise `softmax(x / tau)`.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(log_softmax_row(x.row(r), tau).into_iter().map(f64::exp));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, seeded_normal, Rng};

    /// Checks the tape gradient of a scalar function of one parameter against
    /// central differences.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = seeded_normal(&mut Rng::seed(seed), shape, 1.0).unwrap();
        let mut g = Graph::new();
        let x = g.param(0, x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = &grads.entries[0].1;
        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let x = g.param(0, t.clone());
                let l = build(&mut g, x);
                g.value(l).item()
            },
            &x0,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn weights(seed: u64, shape: &[usize]) -> Tensor {
        seeded_normal(&mut Rng::seed(seed), shape, 1.0).unwrap()
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let w = weights(11, &[4, 3]);
        let b = weights(12, &[3]);
        check(&[2, 4], 1, |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.linear(x, w, Some(b)).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.mean(y2)
        });
        let a = weights(13, &[2, 4]);
        check(&[4, 3], 2, |g, w| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, w).unwrap();
            let z = g.matmul_bt(y, y).unwrap();
            g.mean(z)
        });
    }

    #[test]
    fn row_broadcast_gradients() {
        let a = weights(21, &[3, 4]);
        check(&[4], 3, |g, r| {
            let a = g.constant(a.clone());
            let y = g.mul_row(a, r).unwrap();
            let y = g.add_row(y, r).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn slicing_gather_and_concat_gradients() {
        check(&[5, 4], 4, |g, t| {
            let e = g.gather(t, &[0, 3, 3, 1]).unwrap();
            let a = g.slice_cols(e, 0, 2).unwrap();
            let b = g.slice_cols(e, 2, 2).unwrap();
            let ab = g.mul(a, b).unwrap();
            let c = g.concat_cols(&[ab, a]).unwrap();
            let c = g.mul(c, c).unwrap();
            g.mean(c)
        });
    }

    #[test]
    fn normalization_and_softmax_gradients() {
        let mut mask = Tensor::ones(&[3, 3]);
        mask.set2(0, 1, 0.0);
        mask.set2(0, 2, 0.0);
        mask.set2(1, 2, 0.0);
        let probe = weights(31, &[3, 3]);
        check(&[3, 3], 5, |g, x| {
            let n = g.layer_norm(x, 1e-5);
            let p = g.masked_softmax(n, &mask).unwrap();
            let w = g.constant(probe.clone());
            let y = g.mul(p, w).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn cross_entropy_and_kl_gradients() {
        let teacher = weights(41, &[3, 5]);
        check(&[3, 5], 6, |g, z| {
            let ce = g.cross_entropy(z, &[0, 4, 2]).unwrap();
            let kl = g.soft_kl(&teacher, z, 2.0).unwrap();
            g.weighted_sum(&[(0.3, ce), (0.7, kl)]).unwrap()
        });
    }

    #[test]
    fn relaxed_spike_gradient_is_exact() {
        check(&[2, 3], 7, |g, u| {
            let s = g.spike(u, 0.5, 2.0, true);
            let t = g.ternary_spike(u, 1.0, 2.0, true);
            let y = g.add(s, t).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn hard_spike_uses_surrogate() {
        let mut g = Graph::new();
        let u = g.param(0, Tensor::from_rows(&[&[0.0, 1.0, 2.0]]));
        let s = g.spike(u, 1.0, 2.0, false);
        assert_eq!(g.value(s).data(), &[0.0, 1.0, 1.0]);
        let l = g.mean(s);
        let grads = g.backward(l).unwrap();
        let d = grads.entries[0].1.data();
        let expect = |x: f64| surrogate_grad_scalar(x - 1.0, 2.0) / 3.0;
        for (i, x) in [0.0, 1.0, 2.0].into_iter().enumerate() {
            assert!((d[i] - expect(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn all_masked_row_attends_to_self() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let mask = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let p = g.masked_softmax(x, &mask).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn detached_and_constant_paths_carry_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(0, Tensor::scalar(2.0));
        let d = g.detach(p);
        let y = g.mul(d, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.entries.len(), 1);
        assert_eq!(grads.entries[0].1.item(), 2.0);
    }
}
