//! Dense row-major `f64` tensors, a seedable RNG and the central-difference
//! gradient oracle used throughout the test suites.

use std::cell::Cell;
use std::fmt;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense tensor of `f64` stored in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows. Panics on ragged input; test helper.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { shape: vec![rows.len(), cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            r => self.shape[..r - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.check_same_shape(p)?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Mean over the leading axis.
    pub fn mean_outer(&self) -> Self {
        let n = self.shape[0];
        let inner: usize = self.shape[1..].iter().product();
        let mut out = vec![0.0; inner];
        for t in 0..n {
            for (o, x) in out.iter_mut().zip(&self.data[t * inner..(t + 1) * inner]) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Self { shape: self.shape[1..].to_vec(), data: out }
    }

    /// Matrix product, batched over leading dimensions of `self` when `other`
    /// is a matrix, or over matching leading dimensions when both are batched.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let batch_a: usize = self.shape[..self.rank() - 2].iter().product();
        let shared_rhs = other.rank() == 2;
        if !shared_rhs && self.shape[..self.rank() - 2] != other.shape[..other.rank() - 2] {
            return Err(Error::Dimension(format!(
                "matmul batch dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; batch_a * m * n];
        for b in 0..batch_a {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let rhs = if shared_rhs {
                &other.data[..]
            } else {
                &other.data[b * k * n..(b + 1) * k * n]
            };
            gemm(a, rhs, &mut out[b * m * n..(b + 1) * m * n], m, k, n);
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.extend([m, n]);
        Ok(Self { shape, data: out })
    }

    /// `self · otherᵀ` for matrices.
    pub fn matmul_bt(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt inner dimensions differ: {:?} x {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        record_macs(m * k * n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a, b);
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// `selfᵀ · other` for matrices.
    pub fn matmul_at(&self, other: &Self) -> Result<Self> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_at inner dimensions differ: {:?}ᵀ x {:?}",
                self.shape, other.shape
            )));
        }
        record_macs(m * k * n);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &other.data[p * n..(p + 1) * n];
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    record_macs(m * k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

fn record_macs(n: usize) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n as u64));
        }
    });
}

/// Runs `f` with the matmul multiply-accumulate counter armed and returns the
/// number of MACs every dense product on this thread performed.
///
/// Counting is by shape (`m·k·n` per product), independent of operand values.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let n = MAC_COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        MAC_COUNTER.with(|c| c.set(Some(p + n)));
    }
    (out, n)
}

/// Seedable random stream backed by ChaCha8, whose output is specified
/// bit-for-bit independent of platform and endianness.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Normal samples with mean 0 and standard deviation `std`.
pub fn seeded_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Validation(format!("std must be finite and >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape, data)
}

/// Central-difference gradient `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}
