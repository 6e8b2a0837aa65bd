use mixer::backbones::{init_backbone, BackboneConfig, BackboneKind};
use mixer::datagen::{generate, Benchmark};
use mixer::metrics::routing_purity;
use mixer::moe::ExpertBank;
use mixer::trainer::{evaluate, train, GateMode, Model, TrainConfig};

fn run(seed: u64, init_seed: u64, m: usize, ctx_dim: usize) {
    let set = generate(Benchmark::OdeBench2, 0).unwrap();
    let data = set.model_view();
    let families = set.family_labels();
    let bb_cfg = BackboneConfig::new(BackboneKind::Lora, 2, ctx_dim / m);
    let experts = (0..m).map(|_| init_backbone(&bb_cfg, init_seed)).collect();
    let bank = ExpertBank::new(experts, true);
    let model = Model::new(bank, ctx_dim, data.len());
    let cfg = TrainConfig {
        outer_iters: 40,
        val_period: 5,
        substeps: 1,
        seed,
        gate_mode: GateMode::KmeansLeastSquares,
        ..TrainConfig::default()
    };
    let out = train(&data, model, &cfg, None).unwrap();
    let best = out.state.best_model.as_ref().unwrap_or(&out.state.model);
    let report = evaluate(best, &data, cfg.substeps, 0.1).unwrap();
    let purity = routing_purity(&report.routing, &families).unwrap();
    println!(
        "seed {seed} init {init_seed} M={m} ctx={ctx_dim}: purity {purity:.2} test_rel {:.3e}",
        report.test_relmse
    );
}

fn main() {
    run(2, 2, 2, 12);
    run(0, 0, 2, 12);
    run(1, 1, 2, 12);
    run(0, 0, 1, 6);
    run(1, 1, 1, 6);
    run(2, 2, 1, 6);
    run(2, 0, 2, 8);
    run(1, 0, 2, 8);
}
