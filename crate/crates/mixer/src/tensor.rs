//! Dense float64 arrays of rank 0, 1 or 2 with the small set of
//! operations the models and gate need. All math is plain (undifferentiated);
//! the tape in [`crate::autodiff`] wraps these kernels.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of a [`Tensor`]: rank 0, 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a matrix, or 1 otherwise.
    pub fn rows(&self) -> usize {
        match *self {
            Shape::Matrix(r, _) => r,
            _ => 1,
        }
    }

    /// Columns of a matrix, the length of a vector, or 1 for a scalar.
    pub fn cols(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(_, c) => c,
        }
    }
}

/// Dense row-major float64 array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "shape/data length mismatch");
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::Scalar,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Tensor {
            shape: Shape::Matrix(rows, cols),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, v: f64) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single scalar value; panics on non-scalar.
    pub fn item(&self) -> f64 {
        assert!(matches!(self.shape, Shape::Scalar), "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let c = self.shape.cols();
        self.data[row * c + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let c = self.shape.cols();
        self.data[row * c + col] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l1_distance(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        match (self.shape, other.shape) {
            (a, b) if a == b => Ok(Tensor {
                shape: self.shape,
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            }),
            (_, Shape::Scalar) => Ok(self.map(|v| f(v, other.data[0]))),
            (Shape::Scalar, _) => Ok(other.map(|v| f(self.data[0], v))),
            // Row broadcast: each matrix row combined with the vector.
            (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => {
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        data.push(f(self.data[i * c + j], other.data[j]));
                    }
                }
                Ok(Tensor::matrix(r, c, data))
            }
            (Shape::Vector(n), Shape::Matrix(r, c)) if c == n => {
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        data.push(f(self.data[j], other.data[i * c + j]));
                    }
                }
                Ok(Tensor::matrix(r, c, data))
            }
            (lhs, rhs) => Err(Error::ShapeMismatch { op, lhs, rhs }),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "div", |a, b| a / b)
    }

    /// Matrix product. Supports matrix×matrix, matrix×vector and
    /// vector×matrix; a vector is treated as a row or column as required.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape,
            rhs: other.shape,
        };
        match (self.shape, other.shape) {
            (Shape::Matrix(m, k1), Shape::Matrix(k2, n)) => {
                if k1 != k2 {
                    return Err(err());
                }
                Ok(Tensor::matrix(m, n, matmul_raw(&self.data, &other.data, m, k1, n)))
            }
            (Shape::Matrix(m, k1), Shape::Vector(k2)) => {
                if k1 != k2 {
                    return Err(err());
                }
                Ok(Tensor::vector(matmul_raw(&self.data, &other.data, m, k1, 1)))
            }
            (Shape::Vector(k1), Shape::Matrix(k2, n)) => {
                if k1 != k2 {
                    return Err(err());
                }
                Ok(Tensor::vector(matmul_raw(&self.data, &other.data, 1, k1, n)))
            }
            _ => Err(err()),
        }
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul(w)?.add(b)
    }

    pub fn transpose(&self) -> Tensor {
        match self.shape {
            Shape::Matrix(r, c) => {
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = self.data[i * c + j];
                    }
                }
                Tensor::matrix(c, r, data)
            }
            _ => self.clone(),
        }
    }

    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape, other.shape) {
            (Shape::Vector(_), Shape::Vector(_)) => {
                let mut data = self.data.clone();
                data.extend_from_slice(&other.data);
                Ok(Tensor::vector(data))
            }
            // Column-wise concatenation of row-aligned matrices.
            (Shape::Matrix(r1, c1), Shape::Matrix(r2, c2)) if r1 == r2 => {
                let mut data = Vec::with_capacity(r1 * (c1 + c2));
                for i in 0..r1 {
                    data.extend_from_slice(&self.data[i * c1..(i + 1) * c1]);
                    data.extend_from_slice(&other.data[i * c2..(i + 1) * c2]);
                }
                Ok(Tensor::matrix(r1, c1 + c2, data))
            }
            (lhs, rhs) => Err(Error::ShapeMismatch { op: "concat", lhs, rhs }),
        }
    }

    /// Contiguous element slice reinterpreted as a vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: self.shape,
                rhs: Shape::Vector(start + len),
            });
        }
        Ok(Tensor::vector(self.data[start..start + len].to_vec()))
    }

    /// Same data under a new shape of identical length.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Sum of each column of a matrix (identity on vectors/scalars).
    pub fn col_sum(&self) -> Tensor {
        match self.shape {
            Shape::Matrix(r, c) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += self.data[i * c + j];
                    }
                }
                Tensor::vector(out)
            }
            _ => self.clone(),
        }
    }
}

/// Row-major `(m×k)·(k×n)` kernel shared by the plain and tape paths.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Swish activation `x·σ(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = Tensor::vector(vec![1.0, 0.0, -1.0]);
        let av = a.matmul(&v).unwrap();
        assert_eq!(av.shape(), Shape::Vector(2));
        assert_eq!(av.data(), &[-2.0, -2.0]);

        let w = Tensor::vector(vec![1.0, 1.0]);
        let wa = w.matmul(&a).unwrap();
        assert_eq!(wa.data(), &[5.0, 7.0, 9.0]);

        let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn matmul_mismatch_is_error() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]);
        let b = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn row_broadcast_add() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let v = Tensor::vector(vec![10.0, 20.0]);
        let s = m.add(&v).unwrap();
        assert_eq!(s.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn scalar_broadcast() {
        let v = Tensor::vector(vec![1.0, 2.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(v.mul(&s).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(s.sub(&v).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0, 5.0]);
        let c = a.concat(&b).unwrap();
        assert_eq!(c.shape(), Shape::Vector(5));
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = c.slice(2, 2).unwrap();
        assert_eq!(s.data(), &[3.0, 4.0]);
        assert!(c.slice(4, 3).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().at(2, 1), 6.0);
    }

    #[test]
    fn swish_at_zero() {
        assert_eq!(swish(0.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        // Stable in both tails.
        assert!(swish(-745.0).is_finite());
        assert!((swish(40.0) - 40.0).abs() < 1e-12);
    }
}
