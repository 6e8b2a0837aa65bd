//! Generate the two-family benchmark into `target/example-out` and show
//! its manifest.
//!
//! Usage: cargo run --release --example generate_dataset

use mixer::data::EnvironmentSet;
use mixer::datagen::{generate, Benchmark};

fn main() {
    let out = std::path::Path::new("target/example-out");
    std::fs::create_dir_all(out).unwrap();

    let set = generate(Benchmark::OdeBench2, 0).unwrap();
    print!("{}", set.manifest());

    let path = out.join("odebench-2-seed0.mxds");
    set.save(&path).unwrap();
    let loaded = EnvironmentSet::load(&path).unwrap();
    println!(
        "saved {} ({} bytes), round-trip equal: {}",
        path.display(),
        std::fs::metadata(&path).unwrap().len(),
        loaded == set
    );

    // The trainer-facing view carries trajectories only; family labels
    // stay behind the evaluation accessors.
    let view = set.model_view();
    println!(
        "model view: {} environments, {} train + {} test trajectories each",
        view.len(),
        view[0].train.len(),
        view[0].test.len()
    );
    println!("family labels (evaluation only): {:?}", set.family_labels());
}
