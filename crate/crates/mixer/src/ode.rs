//! Fixed-step differentiable integration for training, and an embedded
//! Dormand–Prince 4(5) pair for high-accuracy data generation.
//!
//! Training follows discretize-then-differentiate: the RK4 update is
//! unrolled onto the tape, so gradients flow to the initial state, the
//! context and every parameter the vector field touches.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Uniform output grid with inclusive endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t_end.is_finite() || t_end <= t0 {
            return Err(Error::config(format!(
                "time grid requires finite t_end > t0, got [{t0}, {t_end}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::config("time grid requires n_steps >= 1"));
        }
        Ok(TimeGrid { t0, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = self.dt();
        (0..=self.n_steps).map(move |i| self.t0 + dt * i as f64)
    }
}

/// One realization of one environment: the grid plus a
/// `(n_steps + 1) × d` state matrix, row 0 being the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Tensor,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.shape().cols()
    }

    pub fn n_rows(&self) -> usize {
        self.states.shape().rows()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.states.row(t)
    }

    pub fn is_finite(&self) -> bool {
        self.states.is_finite()
    }
}

/// Unrolled classic RK4 on the tape. `z0` may be a `d`-vector or an
/// `I×d` matrix of stacked initial states integrated in lockstep.
/// Returns one state per grid time, index 0 being `z0` itself.
pub fn integrate_rk4<F>(field: F, z0: &Var, grid: TimeGrid, substeps: usize) -> Result<Vec<Var>>
where
    F: Fn(&Var) -> Result<Var>,
{
    assert!(substeps >= 1, "substeps must be >= 1");
    let h = grid.dt() / substeps as f64;
    let mut states = Vec::with_capacity(grid.n_steps + 1);
    states.push(z0.clone());
    let mut z = z0.clone();
    for step in 1..=grid.n_steps {
        for _ in 0..substeps {
            z = rk4_step(&field, &z, h)?;
        }
        if !z.is_finite() {
            return Err(Error::IntegrationBlowUp { time_index: step });
        }
        states.push(z.clone());
    }
    Ok(states)
}

fn rk4_step<F>(field: &F, z: &Var, h: f64) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    let k1 = field(z)?;
    let k2 = field(&z.add(&k1.scale(h / 2.0))?)?;
    let k3 = field(&z.add(&k2.scale(h / 2.0))?)?;
    let k4 = field(&z.add(&k3.scale(h))?)?;
    let incr = k1
        .add(&k2.scale(2.0))?
        .add(&k3.scale(2.0))?
        .add(&k4)?
        .scale(h / 6.0);
    z.add(&incr)
}

/// Plain-float RK4 with the same stepping scheme as [`integrate_rk4`].
pub fn integrate_rk4_plain<F>(
    field: F,
    z0: &Tensor,
    grid: TimeGrid,
    substeps: usize,
) -> Result<Vec<Tensor>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(substeps >= 1, "substeps must be >= 1");
    let h = grid.dt() / substeps as f64;
    let mut states = Vec::with_capacity(grid.n_steps + 1);
    states.push(z0.clone());
    let mut z = z0.clone();
    for step in 1..=grid.n_steps {
        for _ in 0..substeps {
            let k1 = field(&z)?;
            let k2 = field(&z.add(&k1.scale(h / 2.0))?)?;
            let k3 = field(&z.add(&k2.scale(h / 2.0))?)?;
            let k4 = field(&z.add(&k3.scale(h))?)?;
            let incr = k1
                .add(&k2.scale(2.0))?
                .add(&k3.scale(2.0))?
                .add(&k4)?
                .scale(h / 6.0);
            z = z.add(&incr)?;
        }
        if !z.is_finite() {
            return Err(Error::IntegrationBlowUp { time_index: step });
        }
        states.push(z.clone());
    }
    Ok(states)
}

// Dormand–Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince 4(5) integration of a plain vector field,
/// sampled exactly on the grid (steps never cross an output time).
///
/// The field writes dz/dt into its second argument.
pub fn integrate_adaptive<F>(
    field: F,
    z0: &[f64],
    grid: TimeGrid,
    rtol: f64,
    atol: f64,
) -> Result<Trajectory>
where
    F: Fn(&[f64], &mut [f64]),
{
    assert!(rtol > 0.0 && atol > 0.0, "tolerances must be positive");
    let d = z0.len();
    let span = grid.t_end - grid.t0;
    let h_min = 1e-12 * span;
    let mut states = Vec::with_capacity((grid.n_steps + 1) * d);
    states.extend_from_slice(z0);

    let mut z = z0.to_vec();
    let mut k = vec![vec![0.0; d]; 7];
    let mut y_stage = vec![0.0; d];
    let mut h = grid.dt() / 10.0;

    let times: Vec<f64> = grid.times().collect();
    for (step, window) in times.windows(2).enumerate() {
        let (mut t, t_next) = (window[0], window[1]);
        while t < t_next {
            let h_try = h.min(t_next - t);
            if h_try < h_min {
                return Err(Error::StepSizeUnderflow { t });
            }

            field(&z, &mut k[0]);
            for stage in 0..6 {
                for i in 0..d {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(stage + 1) {
                        acc += A[stage][j] * kj[i];
                    }
                    y_stage[i] = z[i] + h_try * acc;
                }
                field(&y_stage, &mut k[stage + 1]);
            }

            let mut err_sq = 0.0;
            let mut z_new = vec![0.0; d];
            for i in 0..d {
                let mut y5 = 0.0;
                let mut y4 = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    y5 += B5[j] * kj[i];
                    y4 += B4[j] * kj[i];
                }
                let y5 = z[i] + h_try * y5;
                let y4 = z[i] + h_try * y4;
                let sc = atol + rtol * z[i].abs().max(y5.abs());
                let e = (y5 - y4) / sc;
                err_sq += e * e;
                z_new[i] = y5;
            }
            let err = (err_sq / d as f64).sqrt();

            if !err.is_finite() || z_new.iter().any(|v| !v.is_finite()) {
                // Retry with a smaller step before declaring a blow-up.
                h = h_try / 10.0;
                if h < h_min {
                    return Err(Error::IntegrationBlowUp { time_index: step + 1 });
                }
                continue;
            }

            if err <= 1.0 {
                t += h_try;
                z = z_new;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h_try * factor).min(span);
        }
        states.extend_from_slice(&z);
    }

    Ok(Trajectory {
        grid,
        states: Tensor::matrix(grid.n_steps + 1, d, states),
    })
}
