//! AdaBelief updates: Adam-style moments where the second moment tracks
//! the belief `(g − m)²` in the gradient prediction instead of `g²`.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-16;

/// Moments for one parameter group. The step counter is shared across the
/// group: every tensor in the group is updated together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaBeliefState {
    m: Vec<Tensor>,
    s: Vec<Tensor>,
    step: u64,
}

impl AdaBeliefState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdaBeliefState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            s: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the whole group:
    /// `m ← β1·m + (1−β1)·g`, `s ← β2·s + (1−β2)·(g−m)² + ε`,
    /// `p ← p − lr·m̂/(√ŝ + ε)` with bias-corrected `m̂`, `ŝ`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "group size mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for ((p, g), (m, s)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.s.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            let pd = p.data_mut();
            let md = m.data_mut();
            let sd = s.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
                let belief = gi - md[i];
                sd[i] = BETA2 * sd[i] + (1.0 - BETA2) * belief * belief + EPS;
                let m_hat = md[i] / bc1;
                let s_hat = sd[i] / bc2;
                pd[i] -= lr * m_hat / (s_hat.sqrt() + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(Shape::Vector(3));
        let mut state = AdaBeliefState::new(&[&p]);
        state.step(&mut [&mut p], std::slice::from_ref(&g), 0.1);
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_reaches_the_moment_fixed_point() {
        // With g constant, m → g and s → ε/(1−β2), so the update magnitude
        // approaches lr·|g|/(√(ε/(1−β2)) + ε).
        let g_val = 0.37;
        let lr = 1e-3;
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(g_val);
        let mut state = AdaBeliefState::new(&[&p]);
        let mut prev = p.item();
        let mut last_step = 0.0;
        // Long enough for the early belief transients to decay below the
        // ε floor (β2^t · g² ≪ ε/(1−β2)).
        for _ in 0..60_000 {
            state.step(&mut [&mut p], std::slice::from_ref(&g), lr);
            last_step = prev - p.item();
            prev = p.item();
        }
        let s_fix = EPS / (1.0 - BETA2);
        let expect = lr * g_val / (s_fix.sqrt() + EPS);
        assert!(
            (last_step - expect).abs() / expect < 1e-3,
            "step {last_step} vs fixed point {expect}"
        );
        // And the drift is bounded by that fixed-point magnitude.
        assert!(last_step <= lr * g_val / s_fix.sqrt() * 1.001);
    }

    #[test]
    fn identical_groups_update_identically() {
        let init = Tensor::matrix(2, 2, vec![0.5, -0.5, 1.5, 0.01]);
        let g = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]);
        let mut p1 = init.clone();
        let mut p2 = init.clone();
        let mut s1 = AdaBeliefState::new(&[&p1]);
        let mut s2 = AdaBeliefState::new(&[&p2]);
        for _ in 0..50 {
            s1.step(&mut [&mut p1], std::slice::from_ref(&g), 0.01);
            s2.step(&mut [&mut p2], std::slice::from_ref(&g), 0.01);
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (x − 3)²; gradient 2(x − 3).
        let mut p = Tensor::scalar(0.0);
        let mut state = AdaBeliefState::new(&[&p]);
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            state.step(&mut [&mut p], std::slice::from_ref(&g), 0.05);
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "ended at {}", p.item());
    }
}
