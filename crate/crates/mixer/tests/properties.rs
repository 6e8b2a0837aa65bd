//! Property tests for the metric and routing invariants.

use mixer::metrics::{mse_loss, rel_mse, routing_purity, tprmse};
use mixer::moe::Gate;
use mixer::tensor::Tensor;
use proptest::prelude::*;

fn pair_strategy() -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
    // Trajectory pairs of equal T×2 shape with values away from the
    // rel-MSE norm floor.
    prop::collection::vec(
        (
            prop::collection::vec(0.1f64..3.0, 4),
            prop::collection::vec(0.1f64..3.0, 4),
        ),
        1..6,
    )
}

fn tensors(pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<(Tensor, Tensor)> {
    pairs
        .iter()
        .map(|(p, t)| {
            (
                Tensor::matrix(2, 2, p.clone()),
                Tensor::matrix(2, 2, t.clone()),
            )
        })
        .collect()
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(pairs in pair_strategy(), seed in 0u64..1000) {
        let owned = tensors(&pairs);
        let refs: Vec<(&Tensor, &Tensor)> = owned.iter().map(|(p, t)| (p, t)).collect();

        let mut shuffled = owned.clone();
        // Deterministic Fisher-Yates driven by the seed.
        let mut state = seed.wrapping_add(1);
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        let shuffled_refs: Vec<(&Tensor, &Tensor)> = shuffled.iter().map(|(p, t)| (p, t)).collect();

        prop_assert!((mse_loss(&refs).unwrap() - mse_loss(&shuffled_refs).unwrap()).abs() < 1e-12);
        prop_assert!((rel_mse(&refs).unwrap() - rel_mse(&shuffled_refs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rel_mse_is_scale_invariant(pairs in pair_strategy(), scale in 0.25f64..4.0) {
        let owned = tensors(&pairs);
        let refs: Vec<(&Tensor, &Tensor)> = owned.iter().map(|(p, t)| (p, t)).collect();
        let scaled: Vec<(Tensor, Tensor)> = owned
            .iter()
            .map(|(p, t)| (p.scale(scale), t.scale(scale)))
            .collect();
        let scaled_refs: Vec<(&Tensor, &Tensor)> = scaled.iter().map(|(p, t)| (p, t)).collect();
        let a = rel_mse(&refs).unwrap();
        let b = rel_mse(&scaled_refs).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn tprmse_is_monotone_in_eps(vals in prop::collection::vec(0.0f64..1.0, 1..20),
                                 lo in 0.01f64..0.5, hi_delta in 0.0f64..0.5) {
        let hi = lo + hi_delta + 1e-9;
        prop_assert!(tprmse(&vals, lo).unwrap() <= tprmse(&vals, hi).unwrap());
    }

    #[test]
    fn purity_is_invariant_to_expert_relabeling(
        routing in prop::collection::vec(0usize..3, 4..20),
        families in prop::collection::vec(0usize..3, 4..20),
    ) {
        let n = routing.len().min(families.len());
        let routing = &routing[..n];
        let families = &families[..n];
        // Swap expert labels 0 <-> 1: the best bijection absorbs it.
        let relabeled: Vec<usize> = routing
            .iter()
            .map(|&m| match m { 0 => 1, 1 => 0, other => other })
            .collect();
        let a = routing_purity(routing, families).unwrap();
        let b = routing_purity(&relabeled, families).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn routing_depends_on_logits_only_through_argmax(
        w in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 3),
        xi in prop::collection::vec(-2.0f64..2.0, 2),
        shift in -10.0f64..10.0,
    ) {
        let gate = Gate {
            w: Tensor::matrix(2, 3, w.clone()),
            b: Tensor::vector(b.clone()),
        };
        let shifted = Gate {
            w: Tensor::matrix(2, 3, w),
            b: Tensor::vector(b.iter().map(|v| v + shift).collect()),
        };
        let xi = Tensor::vector(xi);
        prop_assert_eq!(gate.route(&xi).unwrap(), shifted.route(&xi).unwrap());
    }
}
