//! Context-only adaptation: after a quick training run, a new environment
//! is fitted by optimizing a fresh context vector while every shared
//! parameter stays frozen.
//!
//! Usage: cargo run --release --example adapt_context

use mixer::backbones::{init_backbone, BackboneConfig, BackboneKind};
use mixer::checkpoint::shared_param_checksum;
use mixer::datagen::{generate, Benchmark};
use mixer::moe::ExpertBank;
use mixer::trainer::{adapt, train, AdaptConfig, Model, TrainConfig};

fn main() {
    let set = generate(Benchmark::Lv, 0).unwrap();
    let data = set.model_view();

    let bb = BackboneConfig::new(BackboneKind::Lora, 2, 4).with_width(16);
    let bank = ExpertBank::new(vec![init_backbone(&bb, 0)], false);
    let model = Model::new(bank, 4, data.len());

    let cfg = TrainConfig {
        outer_iters: 8,
        inner_iters_theta: 6,
        inner_iters_xi: 6,
        val_period: 2,
        substeps: 1,
        seed: 0,
        ..TrainConfig::default()
    };
    let trained = train(&data, model, &cfg, None).unwrap();
    let model = &trained.state.model;

    let adapt_envs = set.adapt_view();
    let before = shared_param_checksum(model);
    println!("shared-parameter checksum before adaptation: {before:016x}");

    for (e, env) in adapt_envs.iter().enumerate() {
        let result = adapt(
            model,
            env,
            &AdaptConfig {
                steps: 150,
                substeps: 1,
                ..AdaptConfig::default()
            },
        )
        .unwrap();
        println!(
            "adapt env {e}: routed to expert {}, final training loss {:.3e}",
            result.routing, result.final_loss
        );
        println!("  fitted context: {:?}", result.context.data());
    }

    let after = shared_param_checksum(model);
    println!("shared-parameter checksum after adaptation:  {after:016x}");
    println!("frozen: {}", if before == after { "ok" } else { "VIOLATED" });
}
