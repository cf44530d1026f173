//! Dense row-major tensors and the numerical kernels built on them.

mod conv;
mod eigen;
pub mod io;
mod linalg;
mod pool;
mod scalar;

pub use conv::{col2im, conv2d, conv2d_batch, conv_output_extent, im2col, ConvGeometry, Padding};
pub use eigen::{sym_eigh, sym_eigvalsh, SymEigResult, EIGEN_MAX_DIM};
pub use linalg::{gemm, gemm_tn, gemm_tn_acc, matmul, transpose_into};
pub use pool::{global_avg_pool, maxpool2};
pub(crate) use pool::{global_avg_pool_batch, maxpool2_batch};
pub use scalar::{DType, Scalar};

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor rank must be at least 1"));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let p = rows.len();
        let q = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(p * q);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != q {
                return Err(Error::shape(format!("row {i} has length {}, expected {q}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![p, q], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[p, q] => Ok((p, q)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let q = self.shape[1];
        self.data[i * q + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let q = self.shape[self.shape.len() - 1];
        &self.data[i * q..(i + 1) * q]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        let (p, q) = self.dims2().expect("column() needs a matrix");
        (0..p).map(|i| self.data[i * q + j]).collect()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (p, q) = self.dims2()?;
        let mut out = vec![T::zero(); p * q];
        transpose_into(&self.data, &mut out, p, q);
        Self::new(vec![q, p], out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Keeps the listed columns of a matrix, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let (p, q) = self.dims2()?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= q) {
            return Err(Error::shape(format!("column {bad} out of range for {p}x{q}")));
        }
        let mut data = Vec::with_capacity(p * cols.len());
        for i in 0..p {
            let row = &self.data[i * q..(i + 1) * q];
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self::new(vec![p, cols.len()], data)
    }

    /// Keeps the listed slices along the leading axis, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let p = self.shape[0];
        let stride = self.numel() / p;
        if let Some(&bad) = rows.iter().find(|&&r| r >= p) {
            return Err(Error::shape(format!("row {bad} out of range for leading extent {p}")));
        }
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(shape, data)
    }

    /// Keeps the listed indices along the last axis.
    pub fn select_last(&self, keep: &[usize]) -> Result<Self> {
        let last = *self.shape.last().unwrap();
        if let Some(&bad) = keep.iter().find(|&&c| c >= last) {
            return Err(Error::shape(format!("index {bad} out of range for last extent {last}")));
        }
        let outer = self.numel() / last;
        let mut data = Vec::with_capacity(outer * keep.len());
        for o in 0..outer {
            let row = &self.data[o * last..(o + 1) * last];
            data.extend(keep.iter().map(|&c| row[c]));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = keep.len();
        Self::new(shape, data)
    }

    /// Keeps the listed indices along axis `axis` (all other axes intact).
    pub fn select_axis(&self, axis: usize, keep: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(format!("axis {axis} out of range for rank {}", self.rank())));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = keep.iter().find(|&&c| c >= extent) {
            return Err(Error::shape(format!("index {bad} out of range for axis extent {extent}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &k in keep {
                data.extend_from_slice(&self.data[base + k * inner..base + (k + 1) * inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Self::new(shape, data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numerical(format!("{what} contains non-finite values")))
        }
    }
}
