//! Desk-scale run of the headline experiment: two loosely related ODE
//! families learned jointly by a two-expert mixture, with the K-means +
//! least-squares gating refresh separating the families within a few
//! outer iterations.
//!
//! Takes a couple of minutes on one core.
//!
//! Usage: cargo run --release --example train_two_families

use mixer::backbones::{init_backbone, BackboneConfig, BackboneKind};
use mixer::datagen::{generate, Benchmark};
use mixer::metrics::routing_purity;
use mixer::moe::ExpertBank;
use mixer::trainer::{evaluate, train, Model, TrainConfig};

fn main() {
    let set = generate(Benchmark::OdeBench2, 0).unwrap();
    let data = set.model_view();
    let families = set.family_labels();
    println!(
        "{} environments, families hidden from the trainer: {:?}",
        data.len(),
        families
    );

    // Two experts, contexts split so each expert sees its own half.
    let context_dim = 8;
    let experts = 2;
    let bb = BackboneConfig::new(BackboneKind::Lora, 2, context_dim / experts).with_width(32);
    let bank = ExpertBank::new(
        (0..experts).map(|_| init_backbone(&bb, 0)).collect(),
        true,
    );
    let model = Model::new(bank, context_dim, data.len());

    let cfg = TrainConfig {
        outer_iters: 20,
        val_period: 2,
        substeps: 1,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = train(&data, model, &cfg, None).unwrap();

    println!("outer  train_mse      val_relmse    purity  routing");
    for row in out.history.iter().step_by(2) {
        let purity = routing_purity(&row.routing, &families).unwrap();
        println!(
            "{:5}  {:12.4e}  {:12.4e}  {:6.2}  {:?}",
            row.outer_iter, row.train_mse, row.val_relmse, purity, row.routing
        );
    }

    let best = out.state.best_model.as_ref().unwrap_or(&out.state.model);
    let report = evaluate(best, &data, cfg.substeps, 0.1).unwrap();
    println!(
        "\nbest model: train relmse {:.3e}, test relmse {:.3e}, tprmse {:.1}%",
        report.train_relmse, report.test_relmse, report.tprmse
    );
}
