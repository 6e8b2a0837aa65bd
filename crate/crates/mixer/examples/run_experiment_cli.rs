//! The full batch-experiment flow through the library calls that back the
//! `mixer` binary: generate → train → eval → adapt → plot, all inside
//! `target/example-out/run-demo`.
//!
//! Usage: cargo run --release --example run_experiment_cli

use mixer::cli::{cmd_adapt, cmd_eval, cmd_generate, cmd_plot, cmd_train, TrainOverrides};
use std::path::Path;

fn main() {
    let root = Path::new("target/example-out/run-demo");
    std::fs::create_dir_all(root).unwrap();

    let dataset = cmd_generate("lv", 0, &root.join("data")).unwrap();

    let config_path = root.join("experiment.cfg");
    std::fs::write(
        &config_path,
        format!(
            "# Minimal single-expert run on the predator-prey benchmark.\n\
             benchmark = lv\n\
             dataset = {}\n\
             backbone = lora\n\
             experts = 1\n\
             context_dim = 4\n\
             width = 16\n\
             outer_iters = 4\n\
             inner_iters_theta = 4\n\
             inner_iters_xi = 4\n\
             substeps = 1\n\
             val_period = 1\n\
             seed = 0\n\
             adapt_steps = 60\n\
             out = {}\n",
            dataset.display(),
            root.join("run").display()
        ),
    )
    .unwrap();

    let run_dir = cmd_train(&config_path, &TrainOverrides::default(), false).unwrap();
    cmd_eval(&run_dir).unwrap();
    cmd_adapt(&run_dir, None).unwrap();
    cmd_plot(&run_dir).unwrap();

    println!("\nrun directory contents:");
    let mut names: Vec<String> = std::fs::read_dir(&run_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for n in names {
        println!("  {n}");
    }
}
