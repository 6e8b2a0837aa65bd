//! Rolling a bound vector field over recorded trajectories.
//!
//! All trajectories of one environment share a time grid, so their initial
//! states stack into an `I×d` matrix and integrate in lockstep; the tape
//! then carries one node per step instead of one per trajectory per step.

use crate::autodiff::Var;
use crate::backbones::{BoundField, BoundFieldPlain};
use crate::error::{Error, Result};
use crate::ode::{integrate_rk4, integrate_rk4_plain, TimeGrid, Trajectory};
use crate::tensor::{Shape, Tensor};

/// Stack the initial states of trajectories sharing a grid into `I×d`.
pub fn stack_initial_states(trajs: &[Trajectory]) -> Result<(Tensor, TimeGrid)> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::config("cannot roll out an empty trajectory set"))?;
    let grid = first.grid;
    let d = first.dim();
    let mut data = Vec::with_capacity(trajs.len() * d);
    for t in trajs {
        if t.grid != grid || t.dim() != d {
            return Err(Error::config(
                "trajectories in one environment must share grid and dimension",
            ));
        }
        data.extend_from_slice(t.row(0));
    }
    Ok((Tensor::matrix(trajs.len(), d, data), grid))
}

/// Stack row `t` of every trajectory into `I×d`.
pub fn stack_row(trajs: &[Trajectory], t: usize) -> Tensor {
    let d = trajs[0].dim();
    let mut data = Vec::with_capacity(trajs.len() * d);
    for tr in trajs {
        data.extend_from_slice(tr.row(t));
    }
    Tensor::matrix(trajs.len(), d, data)
}

/// Plain rollout from the recorded initial states; returns one `I×d`
/// matrix per grid time (index 0 being the stacked initial states).
pub fn rollout_plain(
    field: &BoundFieldPlain,
    trajs: &[Trajectory],
    substeps: usize,
) -> Result<Vec<Tensor>> {
    let (z0, grid) = stack_initial_states(trajs)?;
    integrate_rk4_plain(|z| field.eval(z), &z0, grid, substeps)
}

/// Mean over trajectories and steps (skipping the shared initial row) of
/// the squared state error of a plain rollout.
pub fn rollout_mse_plain(
    field: &BoundFieldPlain,
    trajs: &[Trajectory],
    substeps: usize,
) -> Result<f64> {
    let pred = rollout_plain(field, trajs, substeps)?;
    let grid = trajs[0].grid;
    let mut acc = 0.0;
    for t in 1..=grid.n_steps {
        let truth = stack_row(trajs, t);
        acc += pred[t].sub(&truth)?.sq_norm();
    }
    Ok(acc / (trajs.len() * grid.n_steps) as f64)
}

/// Differentiable rollout; mirrors [`rollout_plain`] on the tape.
pub fn rollout_tape(
    field: &BoundField,
    z0: &Var,
    grid: TimeGrid,
    substeps: usize,
) -> Result<Vec<Var>> {
    integrate_rk4(|z| field.eval(z), z0, grid, substeps)
}

/// Differentiable squared-error loss of a rollout against recorded states,
/// averaged over trajectories and steps 1…T.
pub fn rollout_mse_tape(
    field: &BoundField,
    z0: &Var,
    trajs: &[Trajectory],
    substeps: usize,
) -> Result<Var> {
    let grid = trajs[0].grid;
    let states = rollout_tape(field, z0, grid, substeps)?;
    let tape_scalar_zero = z0.scale(0.0).sum().scale(0.0);
    let mut acc = tape_scalar_zero;
    for t in 1..=grid.n_steps {
        let truth = stack_row(trajs, t);
        let truth_var = leaf_on_same_tape(z0, truth);
        acc = acc.add(&states[t].sub(&truth_var)?.square().sum())?;
    }
    Ok(acc.scale(1.0 / (trajs.len() * grid.n_steps) as f64))
}

fn leaf_on_same_tape(reference: &Var, value: Tensor) -> Var {
    reference.tape_handle().leaf(value)
}

/// Unstack a batched rollout back into one predicted [`Trajectory`] per
/// input trajectory.
pub fn unstack_rollout(pred: &[Tensor], grid: TimeGrid) -> Vec<Trajectory> {
    let (batch, d) = match pred[0].shape() {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(c) => (1, c),
        Shape::Scalar => (1, 1),
    };
    (0..batch)
        .map(|i| {
            let mut data = Vec::with_capacity(pred.len() * d);
            for step in pred {
                let row_start = i * d;
                data.extend_from_slice(&step.data()[row_start..row_start + d]);
            }
            Trajectory {
                grid,
                states: Tensor::matrix(pred.len(), d, data),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};
    use crate::backbones::{init_backbone, Backbone, BackboneConfig, BackboneKind};

    fn sample_env(n_traj: usize) -> Vec<Trajectory> {
        // dz/dt = -z data in two dimensions.
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        (0..n_traj)
            .map(|i| {
                let z0 = [1.0 + i as f64, -0.5 * (i as f64 + 1.0)];
                let mut data = Vec::new();
                for t in grid.times() {
                    data.push(z0[0] * (-t).exp());
                    data.push(z0[1] * (-t).exp());
                }
                Trajectory {
                    grid,
                    states: Tensor::matrix(11, 2, data),
                }
            })
            .collect()
    }

    fn small_backbone() -> Backbone {
        let cfg = BackboneConfig {
            kind: BackboneKind::Lora,
            state_dim: 2,
            context_dim: 3,
            width: 6,
            feature_dim: 4,
        };
        init_backbone(&cfg, 40)
    }

    #[test]
    fn plain_and_tape_losses_agree() {
        let bb = small_backbone();
        let xi = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let trajs = sample_env(3);

        let plain = rollout_mse_plain(&bb.bind_plain(&xi).unwrap(), &trajs, 2).unwrap();

        let tape = Tape::new();
        let lifted = bb.lift(&tape);
        let xi_v = tape.leaf(xi.clone());
        let (z0, _grid) = stack_initial_states(&trajs).unwrap();
        let z0_v = tape.leaf(z0);
        let field = lifted.bind(&xi_v).unwrap();
        let loss = rollout_mse_tape(&field, &z0_v, &trajs, 2).unwrap();

        assert!((plain - loss.item()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_w_r_t_context_matches_finite_differences() {
        let bb = small_backbone();
        let xi = Tensor::vector(vec![0.05, -0.1, 0.2]);
        let trajs = sample_env(2);

        let loss_at = |xi: &Tensor| -> f64 {
            rollout_mse_plain(&bb.bind_plain(xi).unwrap(), &trajs, 1).unwrap()
        };

        let tape = Tape::new();
        let lifted = bb.lift(&tape);
        let xi_v = tape.leaf(xi.clone());
        let (z0, _) = stack_initial_states(&trajs).unwrap();
        let z0_v = tape.leaf(z0);
        let field = lifted.bind(&xi_v).unwrap();
        let loss = rollout_mse_tape(&field, &z0_v, &trajs, 1).unwrap();
        let g = backward(&loss).unwrap().get(&xi_v);

        let h = 1e-5;
        for i in 0..xi.len() {
            let mut hi = xi.clone();
            let mut lo = xi.clone();
            hi.data_mut()[i] += h;
            lo.data_mut()[i] -= h;
            let fd = (loss_at(&hi) - loss_at(&lo)) / (2.0 * h);
            let scale = fd.abs().max(g.data()[i].abs()).max(1e-8);
            assert!(
                (g.data()[i] - fd).abs() / scale < 1e-4,
                "∂ξ[{i}]: {} vs {fd}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn unstack_inverts_stacking() {
        let trajs = sample_env(3);
        let grid = trajs[0].grid;
        let stacked: Vec<Tensor> = (0..=grid.n_steps).map(|t| stack_row(&trajs, t)).collect();
        let back = unstack_rollout(&stacked, grid);
        assert_eq!(back.len(), 3);
        for (orig, rec) in trajs.iter().zip(&back) {
            assert_eq!(orig.states, rec.states);
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let mut trajs = sample_env(2);
        trajs[1].grid = TimeGrid::new(0.0, 2.0, 10).unwrap();
        assert!(stack_initial_states(&trajs).is_err());
    }
}
