//! Dense row-major `f64` tensors.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{self, Exec};

/// Dense row-major tensor. Shape entries are all positive and scalars are
/// represented with shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::DegenerateShape(shape));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "degenerate shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        assert!(!rows.is_empty() && cols > 0, "empty matrix");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.data[i * n + i] = v;
        }
        t
    }

    /// Standard Gaussian entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        t
    }

    /// Uniform entries on `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        t.data
            .iter_mut()
            .for_each(|v| *v = lo + (hi - lo) * rng.random::<f64>());
        t
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_square(&self) -> bool {
        self.is_matrix() && self.shape[0] == self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    /// The single value of a shape-`[1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Views any tensor as a `rows × (len/rows)` matrix.
    pub fn as_matrix(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(Error::shape(
                "as_matrix",
                format!("{:?} cannot be viewed as {rows}x{cols}", self.shape),
            ));
        }
        self.reshape(&[rows, cols])
    }

    pub fn same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                context,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, m, k, n, &mut out, Exec::auto(m * k * n));
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Matrix transpose. Panics if not rank 2.
    pub fn t(&self) -> Tensor {
        assert!(self.is_matrix(), "transpose of shape {:?}", self.shape);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    /// `(A + Aᵀ)/2` for square matrices.
    pub fn sym(&self) -> Tensor {
        assert!(self.is_square(), "sym of shape {:?}", self.shape);
        let n = self.shape[0];
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        let n = self.shape[0].min(self.cols());
        (0..n).map(|i| self.at(i, i)).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + s·other`
    pub fn axpy(&self, s: f64, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    /// Sum of entrywise products.
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Text form: a `shape: d1 ... dk` line, then one line per row of the
    /// last axis, values in 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::from("shape:");
        for d in &self.shape {
            let _ = write!(s, " {d}");
        }
        s.push('\n');
        let width = *self.shape.last().unwrap();
        for row in self.data.chunks(width) {
            let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses [`Tensor::to_text`] output from an iterator of lines; consumes
    /// exactly the header and value lines.
    pub fn from_text_lines<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Tensor> {
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidTensor("missing shape line".into()))?;
        let dims = header
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| Error::InvalidTensor(format!("expected `shape:` line, got `{header}`")))?;
        let shape = dims
            .split_whitespace()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidTensor(format!("bad shape `{dims}`: {e}")))?;
        if shape.is_empty() {
            return Err(Error::DegenerateShape(shape));
        }
        let len: usize = shape.iter().product();
        let width = *shape.last().unwrap();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len / width.max(1) {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidTensor("truncated tensor data".into()))?;
            for v in line.split_whitespace() {
                data.push(
                    v.parse::<f64>()
                        .map_err(|e| Error::InvalidTensor(format!("bad value `{v}`: {e}")))?,
                );
            }
        }
        Tensor::new(shape, data)
    }

    pub fn from_text(text: &str) -> Result<Tensor> {
        Tensor::from_text_lines(&mut text.lines())
    }
}

/// 17 significant digits, which round-trips every finite `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new(vec![], vec![]),
            Err(Error::DegenerateShape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(Error::DegenerateShape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::InvalidTensor(_))
        ));
    }

    #[test]
    fn transpose_and_matmul() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(a.t().shape(), &[3, 2]);
        let g = a.matmul(&a.t()).unwrap();
        assert_eq!(g, Tensor::from_rows(&[[14.0, 32.0], [32.0, 77.0]]));
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn text_format_layout() {
        let t = Tensor::from_rows(&[[1.0, -0.5], [0.1, 3.0]]);
        let text = t.to_text();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("shape: 2 2"));
        assert_eq!(lines.next(), Some("1.0000000000000000e0 -5.0000000000000000e-1"));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bitwise(
            rows in 1usize..4,
            cols in 1usize..5,
            seed in proptest::collection::vec(-1e300f64..1e300, 20),
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(rows * cols).copied().collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let back = Tensor::from_text(&t.to_text()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
