//! Fixed-step and adaptive integration of a harmonic oscillator against
//! its closed-form solution.
//!
//! Usage: cargo run --release --example integrate_oscillator

use mixer::ode::{integrate_adaptive, integrate_rk4_plain, TimeGrid};
use mixer::tensor::Tensor;

fn main() {
    // ẋ0 = x1, ẋ1 = -c0·x0; closed form is a cosine/sine combination.
    let c0: f64 = 2.1;
    let omega = c0.sqrt();
    let z0 = [0.4, -0.03];
    let grid = TimeGrid::new(0.0, 10.0, 100).unwrap();

    let closed_form = |t: f64| z0[0] * (omega * t).cos() + (z0[1] / omega) * (omega * t).sin();

    let adaptive = integrate_adaptive(
        |z, dz| {
            dz[0] = z[1];
            dz[1] = -c0 * z[0];
        },
        &z0,
        grid,
        1e-8,
        1e-10,
    )
    .unwrap();

    let fixed = integrate_rk4_plain(
        |z| Ok(Tensor::vector(vec![z.data()[1], -c0 * z.data()[0]])),
        &Tensor::vector(z0.to_vec()),
        grid,
        2,
    )
    .unwrap();

    let mut max_adaptive = 0.0f64;
    let mut max_fixed = 0.0f64;
    for (i, t) in grid.times().enumerate() {
        let truth = closed_form(t);
        max_adaptive = max_adaptive.max((adaptive.row(i)[0] - truth).abs());
        max_fixed = max_fixed.max((fixed[i].data()[0] - truth).abs());
    }
    println!("horizon 10, 100 output steps");
    println!("adaptive 4(5) max error vs closed form: {max_adaptive:.3e}");
    println!("fixed RK4 (substeps 2) max error:       {max_fixed:.3e}");

    // Order check: halving the step should cut the error ~16x.
    let err_at = |substeps: usize| -> f64 {
        let states = integrate_rk4_plain(
            |z| Ok(z.scale(-1.0)),
            &Tensor::vector(vec![1.0]),
            TimeGrid::new(0.0, 2.0, 10).unwrap(),
            substeps,
        )
        .unwrap();
        TimeGrid::new(0.0, 2.0, 10)
            .unwrap()
            .times()
            .enumerate()
            .map(|(i, t)| (states[i].data()[0] - (-t).exp()).abs())
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (err_at(1), err_at(2));
    println!(
        "RK4 order from step halving on dz/dt = -z: {:.2}",
        (e1 / e2).log2()
    );
}
