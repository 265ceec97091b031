//! Dense rank-1/2 tensors with row-major flat storage.

use crate::error::{Error, Result};

/// Dense real-valued array of rank 1 or 2. Values are immutable once the
/// tensor is constructed; operations return new tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Rank-1 tensor. Rejects non-finite entries.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        ensure_finite(&data, "Tensor::vector")?;
        Ok(Self { shape: vec![data.len()], data })
    }

    /// Rank-2 tensor from row-major data. Rejects non-finite entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "Tensor::matrix",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        ensure_finite(&data, "Tensor::matrix")?;
        Ok(Self { shape: vec![rows, cols], data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { shape: vec![n, n], data }
    }

    /// Internal constructor for values produced by trusted numeric kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op: "Tensor::dims2",
                detail: format!("expected rank 2, got shape {:?}", other),
            }),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (_, c) = (self.shape[0], self.shape[1]);
        self.data[i * c + j]
    }

    /// One row of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Rank-2 tensor made of the selected rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Ok(Tensor::from_parts(vec![rows.len(), c], data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "Tensor::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "Tensor::sub", |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op, step: 0 })
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner dimensions disagree: {}x{} * {}x{}", m, k, k2, n),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax with max-subtraction for stability. Accepts a rank-1
/// tensor as a single row.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (n, k) = match logits.shape() {
        [k] => (1usize, *k),
        [n, k] => (*n, *k),
        _ => unreachable!("tensors are rank 1 or 2"),
    };
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits.data[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (o, &v) in out[i * k..(i + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in &mut out[i * k..(i + 1) * k] {
            *o /= sum;
        }
    }
    Tensor::from_parts(logits.shape.to_vec(), out)
}
