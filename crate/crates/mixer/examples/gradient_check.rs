//! Reverse-mode gradients through an unrolled solver, cross-checked
//! against central finite differences.
//!
//! Usage: cargo run --release --example gradient_check

use mixer::autodiff::{backward, Tape};
use mixer::backbones::{init_backbone, BackboneConfig, BackboneKind};
use mixer::ode::TimeGrid;
use mixer::rollout::{rollout_mse_tape, stack_initial_states};
use mixer::tensor::Tensor;
use mixer::ode::integrate_rk4_plain;
use mixer::ode::Trajectory;

fn main() {
    // A small context-conditioned field and synthetic decay data.
    let cfg = BackboneConfig {
        kind: BackboneKind::Lora,
        state_dim: 2,
        context_dim: 3,
        width: 8,
        feature_dim: 4,
    };
    let backbone = init_backbone(&cfg, 0);
    let xi = Tensor::vector(vec![0.12, -0.05, 0.3]);

    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let trajs: Vec<Trajectory> = (0..3)
        .map(|i| {
            let z0 = Tensor::vector(vec![1.0 + 0.3 * i as f64, -0.4]);
            let states = integrate_rk4_plain(|z| Ok(z.scale(-0.9)), &z0, grid, 2).unwrap();
            let mut data = Vec::new();
            for s in &states {
                data.extend_from_slice(s.data());
            }
            Trajectory {
                grid,
                states: Tensor::matrix(grid.n_steps + 1, 2, data),
            }
        })
        .collect();

    let loss_at = |xi: &Tensor| -> f64 {
        let field = backbone.bind_plain(xi).unwrap();
        mixer::rollout::rollout_mse_plain(&field, &trajs, 2).unwrap()
    };

    // Tape pass.
    let tape = Tape::new();
    let lifted = backbone.lift(&tape);
    let xi_var = tape.leaf(xi.clone());
    let field = lifted.bind(&xi_var).unwrap();
    let (z0, _) = stack_initial_states(&trajs).unwrap();
    let z0_var = tape.leaf(z0);
    let loss = rollout_mse_tape(&field, &z0_var, &trajs, 2).unwrap();
    let grads = backward(&loss).unwrap();
    let g = grads.get(&xi_var);

    println!("loss = {:.6e}  ({} tape nodes)", loss.item(), tape.len());
    println!("context gradient vs central differences (h = 1e-5):");
    let h = 1e-5;
    for i in 0..xi.len() {
        let mut hi = xi.clone();
        let mut lo = xi.clone();
        hi.data_mut()[i] += h;
        lo.data_mut()[i] -= h;
        let fd = (loss_at(&hi) - loss_at(&lo)) / (2.0 * h);
        let ad = g.data()[i];
        let rel = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-12);
        println!("  ∂L/∂ξ[{i}]  reverse {ad:+.8e}   fd {fd:+.8e}   rel err {rel:.2e}");
    }
}
