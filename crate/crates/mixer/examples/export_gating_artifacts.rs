//! Gating diagnostics: per-environment logits as CSV, the argmax
//! histogram, and an SVG heatmap, written to `target/example-out`.
//!
//! Usage: cargo run --release --example export_gating_artifacts

use mixer::metrics::{export_gating, parse_gating_csv};
use mixer::moe::{fit_gate, Clustering, PairingResult};
use mixer::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Ten environments in two context blobs, routed 6/4 by a fitted gate.
    let contexts: Vec<Tensor> = (0..10)
        .map(|e| {
            let (cx, cy) = if e < 6 { (0.0, 0.0) } else { (4.0, 3.0) };
            Tensor::vector(vec![cx + 0.1 * e as f64, cy - 0.07 * e as f64])
        })
        .collect();
    let clustering = Clustering {
        assignment: (0..10).map(|e| usize::from(e >= 6)).collect(),
        centroids: None,
        iterations: 0,
        cost_trace: vec![],
    };
    let pairing = PairingResult { selected: vec![0, 1] };
    let gate = fit_gate(&contexts, &pairing, &clustering, 1e-4, &mut rng).unwrap();

    let out = std::path::Path::new("target/example-out");
    export_gating(&gate, &contexts, out).unwrap();

    let csv = std::fs::read_to_string(out.join("gating_heatmap.csv")).unwrap();
    let rows = parse_gating_csv(&csv).unwrap();
    println!("wrote gating_heatmap.csv ({} rows), gating_histogram.csv,", rows.len());
    println!("and gating_heatmap.svg under {}", out.display());
    println!("\nlogits per environment:");
    for (e, row) in rows.iter().enumerate() {
        println!("  env {e}: {row:?}");
    }
    let hist = std::fs::read_to_string(out.join("gating_histogram.csv")).unwrap();
    print!("\nhistogram:\n{hist}");
}
