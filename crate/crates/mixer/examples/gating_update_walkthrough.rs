//! The four stages of the gating refresh on synthetic data: K-means over
//! contexts, per-expert per-environment losses, median-loss pairing, and
//! the least-squares gate fit.
//!
//! Usage: cargo run --release --example gating_update_walkthrough

use mixer::backbones::{init_backbone, BackboneConfig, BackboneKind};
use mixer::moe::{fit_gate, kmeans, loss_matrix, pair_experts, ExpertBank};
use mixer::data::EnvView;
use mixer::ode::{integrate_rk4_plain, TimeGrid, Trajectory};
use mixer::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env_from_rate(rate: f64, grid: TimeGrid) -> EnvView {
    let z0 = Tensor::vector(vec![1.0, -0.5]);
    let states = integrate_rk4_plain(|z| Ok(z.scale(rate)), &z0, grid, 2).unwrap();
    let mut data = Vec::new();
    for s in &states {
        data.extend_from_slice(s.data());
    }
    EnvView {
        train: vec![Trajectory {
            grid,
            states: Tensor::matrix(grid.n_steps + 1, 2, data),
        }],
        test: vec![],
    }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();

    // Six environments in two behavior groups (decay vs growth), with
    // contexts already separated into two blobs.
    let envs: Vec<EnvView> = (0..6)
        .map(|e| env_from_rate(if e < 3 { -1.0 } else { 0.6 }, grid))
        .collect();
    let contexts: Vec<Tensor> = (0..6)
        .map(|e| {
            let base = if e < 3 { 0.0 } else { 3.0 };
            Tensor::vector(vec![base + 0.05 * e as f64, base - 0.03 * e as f64])
        })
        .collect();

    let cfg = BackboneConfig {
        kind: BackboneKind::Lora,
        state_dim: 2,
        context_dim: 2,
        width: 8,
        feature_dim: 4,
    };
    let bank = ExpertBank::new(vec![init_backbone(&cfg, 1), init_backbone(&cfg, 2)], false);

    // Stage 1: Lloyd's K-means over the stacked contexts (L1 distance).
    let stacked = Tensor::from_rows(
        &contexts.iter().map(|c| c.data().to_vec()).collect::<Vec<_>>(),
    );
    let clustering = kmeans(&stacked, None, 2, 20, 1e-3, &mut rng);
    println!("stage 1 — assignment: {:?} (converged in {} iterations)",
        clustering.assignment, clustering.iterations);

    // Stage 2: every expert scored on every environment.
    let losses = loss_matrix(&bank, &contexts, &envs, 2).unwrap();
    println!("stage 2 — loss matrix (experts x environments):");
    for m in 0..2 {
        let row: Vec<String> = (0..6).map(|e| format!("{:9.3e}", losses.at(m, e))).collect();
        println!("  expert {m}: [{}]", row.join(", "));
    }

    // Stage 3: clusters claim experts by median loss, injectively.
    let pairing = pair_experts(&losses, &clustering);
    println!("stage 3 — cluster -> expert pairing: {:?}", pairing.selected);

    // Stage 4: least-squares gate fit on noisy contexts.
    let gate = fit_gate(&contexts, &pairing, &clustering, 1e-4, &mut rng).unwrap();
    let routing: Vec<usize> = contexts.iter().map(|c| gate.route(c).unwrap()).collect();
    println!("stage 4 — routing through the fitted gate: {routing:?}");
}
