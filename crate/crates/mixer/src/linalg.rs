//! Small dense solvers for the gate fit.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Solve `min ‖A·X − Y‖²_F` by normal equations with a Tikhonov ridge:
/// `(AᵀA + ridge·I)·X = AᵀY`. The ridge keeps the Gram matrix positive
/// definite even for rank-deficient `A`.
pub fn ridge_least_squares(a: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor> {
    let (rows_a, k) = match a.shape() {
        Shape::Matrix(r, c) => (r, c),
        s => {
            return Err(Error::ShapeMismatch {
                op: "ridge_least_squares",
                lhs: s,
                rhs: Shape::Matrix(0, 0),
            })
        }
    };
    let (rows_y, m) = match y.shape() {
        Shape::Matrix(r, c) => (r, c),
        s => {
            return Err(Error::ShapeMismatch {
                op: "ridge_least_squares",
                lhs: s,
                rhs: Shape::Matrix(0, 0),
            })
        }
    };
    if rows_a != rows_y {
        return Err(Error::ShapeMismatch {
            op: "ridge_least_squares",
            lhs: a.shape(),
            rhs: y.shape(),
        });
    }

    let at = a.transpose();
    let mut gram = at.matmul(a)?;
    for i in 0..k {
        let v = gram.at(i, i) + ridge;
        gram.set(i, i, v);
    }
    let rhs = at.matmul(y)?;

    let chol = cholesky(&gram)?;
    let mut out = vec![0.0; k * m];
    let mut col = vec![0.0; k];
    for j in 0..m {
        for i in 0..k {
            col[i] = rhs.at(i, j);
        }
        let x = chol_solve(&chol, &col);
        for i in 0..k {
            out[i * m + j] = x[i];
        }
    }
    Ok(Tensor::matrix(k, m, out))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(g: &Tensor) -> Result<Tensor> {
    let n = g.shape().rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g.at(i, j);
            for p in 0..j {
                sum -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::config(
                        "Cholesky failed: matrix not positive definite",
                    ));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(Tensor::matrix(n, n, l))
}

fn chol_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    // Forward substitution L·v = b.
    let mut v = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l.at(i, j) * v[j];
        }
        v[i] = sum / l.at(i, i);
    }
    // Back substitution Lᵀ·x = v.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = v[i];
        for j in i + 1..n {
            sum -= l.at(j, i) * x[j];
        }
        x[i] = sum / l.at(i, i);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_solution_of_square_system() {
        // A well-conditioned 3×3 system; ridge 1e-8 perturbs ~1e-8.
        let a = Tensor::matrix(3, 3, vec![2.0, 0.0, 1.0, 0.0, 3.0, -1.0, 1.0, -1.0, 4.0]);
        let x_true = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]);
        let y = a.matmul(&x_true).unwrap().reshape(Shape::Matrix(3, 1)).unwrap();
        let x = ridge_least_squares(&a, &y, 1e-8).unwrap();
        for i in 0..3 {
            assert!((x.at(i, 0) - x_true.at(i, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn overdetermined_residual_is_orthogonal() {
        // Normal equations: Aᵀ(A·X − Y) ≈ 0 at the minimizer.
        let a = Tensor::matrix(
            5,
            2,
            vec![1.0, 0.5, 1.0, 1.5, 1.0, 2.5, 1.0, 3.5, 1.0, 4.5],
        );
        let y = Tensor::matrix(5, 1, vec![1.0, 2.1, 2.9, 4.2, 4.8]);
        let x = ridge_least_squares(&a, &y, 1e-8).unwrap();
        let resid = a.matmul(&x).unwrap().sub(&y).unwrap();
        let ortho = a.transpose().matmul(&resid).unwrap();
        for v in ortho.data() {
            assert!(v.abs() < 1e-6, "normal residual {v}");
        }
    }

    #[test]
    fn all_zero_design_still_solves() {
        let a = Tensor::matrix(4, 3, vec![0.0; 12]);
        let y = Tensor::matrix(4, 2, vec![1.0; 8]);
        let x = ridge_least_squares(&a, &y, 1e-8).unwrap();
        assert!(x.is_finite());
        assert_eq!(x.shape(), Shape::Matrix(3, 2));
    }
}
