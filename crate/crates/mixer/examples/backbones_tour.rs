//! The three context-conditioning mechanisms side by side.
//!
//! Usage: cargo run --release --example backbones_tour

use mixer::backbones::{init_backbone, Backbone, BackboneConfig, BackboneKind};
use mixer::tensor::{Shape, Tensor};

fn main() {
    let z = Tensor::vector(vec![0.5, -1.2]);
    let zero_ctx = Tensor::zeros(Shape::Vector(4));
    let ctx = Tensor::vector(vec![0.3, -0.8, 0.1, 0.6]);

    for kind in [BackboneKind::Concat, BackboneKind::Hypernet, BackboneKind::Lora] {
        let cfg = BackboneConfig::new(kind, 2, 4);
        let backbone = init_backbone(&cfg, 42);
        let at_zero = backbone.eval_field(&zero_ctx, &z).unwrap();
        let at_ctx = backbone.eval_field(&ctx, &z).unwrap();
        println!("{kind}:");
        println!("  active parameters: {}", backbone.param_count());
        println!("  G(z; ξ=0) = {:?}", at_zero.data());
        println!("  G(z; ξ)   = {:?}", at_ctx.data());
        if let Backbone::Lora(l) = &backbone {
            // With a zero context the low-rank update vanishes entirely.
            let root = l.root.forward(&z).unwrap();
            println!(
                "  zero-context output equals the root network: {}",
                root == at_zero
            );
        }
        println!();
    }
}
