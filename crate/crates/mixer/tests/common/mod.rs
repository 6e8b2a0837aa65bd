//! Shared helpers for the integration suites. The finite-difference
//! oracle lives here, independent of the reverse-mode implementation it
//! checks.

use mixer::tensor::Tensor;

/// Central finite differences of a scalar function at `x`, one coordinate
/// at a time.
#[allow(dead_code)]
pub fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi.data_mut()[i] += h;
        lo.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// Relative error with a floor that keeps near-zero comparisons sane.
#[allow(dead_code)]
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
