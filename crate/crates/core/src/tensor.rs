//! Dense row-major `f64` tensors.
//!
//! Every operation here is a pure function of its inputs. The autodiff tape in
//! [`crate::autodiff`] reuses these kernels for its forward values, so a graph
//! forward pass and a plain forward pass produce bit-identical numbers.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor after checking that the shape matches the payload and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("new", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite tensor value {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    /// Stacks equal-length rows into a `rows x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn raw_data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::dim("item", format!("shape {:?} is not scalar", self.shape)))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Flattens everything after the first axis: `[n, d1, d2, ..] -> [n, d1*d2*..]`.
    pub fn flatten_rows(&self) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("flatten_rows", "scalar has no rows"))?;
        self.reshape(&[n, self.numel() / n])
    }

    /// Contiguous slice of the `i`-th entry along the first axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.numel() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let stride = self.numel() / self.shape.first().copied().unwrap_or(1).max(1);
        self.data.chunks(stride)
    }

    /// Gathers entries along the first axis, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = self.shape.first().copied().unwrap_or(1);
        if idx.is_empty() {
            return Err(Error::Argument("select_rows with no indices".into()));
        }
        let stride = self.numel() / n;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                return Err(Error::dim("select_rows", format!("row {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates tensors along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim("concat_rows", "trailing shapes differ"));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise binary op where either side may be a one-element tensor.
    pub fn zip_broadcast(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Self::from_parts(self.shape.clone(), data))
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self> {
        self.zip_broadcast(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Self> {
        let (_, n) = self.dims2()?;
        if bias.numel() != n {
            return Err(Error::dim(
                "add_row",
                format!("bias of {} for {n} columns", bias.numel()),
            ));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Per-row sums of a matrix, shape `[rows]`.
    pub fn row_sums(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let data = self.data.chunks(n).map(|r| r.iter().sum()).collect();
        Ok(Self::from_parts(vec![m], data))
    }

    /// Row-wise log-softmax, stabilised by subtracting the row maximum.
    pub fn log_softmax(&self) -> Result<Self> {
        let (_, n) = self.dims2()?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn softmax(&self) -> Result<Self> {
        let (_, n) = self.dims2()?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Index of the largest entry per row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, n) = self.dims2()?;
        Ok(self.data.chunks(n).map(argmax).collect())
    }
}

/// Position of the maximum, first occurrence wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `out[m x n] = a[m x k] . b[k x n]`, accumulating in i-p-j order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Argument("one_hot of no labels".into()));
    }
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Validation(format!("label {l} outside 0..{k}")));
        }
        data[i * k + l] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), k], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let eye = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[[1.5, -2.0, 3.0], [0.25, 4.0, -1.0], [7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_and_mean() {
        let t = Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::vector(vec![2.0, 4.0]).unwrap().mean(), 3.0);
    }

    #[test]
    fn broadcast_only_scalars() {
        let a = Tensor::zeros(&[2, 2]);
        let s = Tensor::scalar(1.0);
        assert_eq!(a.add(&s).unwrap().data(), &[1.0; 4]);
        assert_eq!(s.sub(&a).unwrap().data(), &[1.0; 4]);
        let bad = Tensor::zeros(&[2]);
        assert!(matches!(a.add(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_known_values() {
        let t = Tensor::from_rows(&[[0.0, 0.0], [1f64.ln(), 3f64.ln()]]).unwrap();
        let p = t.softmax().unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[1] - 0.5).abs() < 1e-15);
        assert!((p.data()[2] - 0.25).abs() < 1e-15);
        assert!((p.data()[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn new_rejects_bad_payloads() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
    }

    #[test]
    fn one_hot_checks_range() {
        let t = one_hot(&[2, 0], 3).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(one_hot(&[3], 3).is_err());
    }
}
