//! Deterministic benchmark generation: families of two-dimensional ODEs,
//! parameter grids, initial-condition sampling and integration.
//!
//! Training parameters sweep 90–110% of each family's reference values;
//! adaptation parameters live in 80–90% and 110–120%, disjoint from the
//! training range. Initial conditions are drawn per dimension uniformly
//! between the two reference conditions. Ground truth is integrated with
//! the adaptive pair at rtol 1e-8 / atol 1e-10.

use crate::data::{EnvMeta, EnvironmentSet};
use crate::error::{Error, Result};
use crate::ode::{integrate_adaptive, TimeGrid, Trajectory};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const GEN_RTOL: f64 = 1e-8;
pub const GEN_ATOL: f64 = 1e-10;
const IC_RETRIES: usize = 10;

type Rhs = fn(&[f64], &[f64], &mut [f64]);

/// One ODE family: closed-form right-hand side, reference parameters,
/// two reference initial conditions and the integration horizon. All
/// families are sampled on 100 output steps.
#[derive(Clone)]
pub struct OdeFamily {
    pub ode_id: u32,
    pub name: &'static str,
    pub dim: usize,
    pub params: Vec<f64>,
    pub ic_refs: [Vec<f64>; 2],
    pub horizon: f64,
    pub n_steps: usize,
    rhs: Rhs,
    /// Initial conditions to reject (e.g. near a singularity).
    ic_reject: Option<fn(&[f64]) -> bool>,
}

impl OdeFamily {
    pub fn rhs(&self, params: &[f64], z: &[f64], dz: &mut [f64]) {
        (self.rhs)(params, z, dz)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(0.0, self.horizon, self.n_steps).expect("families have positive horizons")
    }
}

fn rhs_24(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = -p[0] * z[0];
}

fn rhs_25(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = -p[0] * z[0] - p[1] * z[1];
}

fn rhs_28(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = -p[0] * z[0].sin();
}

fn rhs_32(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = -p[0] * z[1] - z[0].powi(3) + z[0];
}

fn rhs_34(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = (-p[0] + z[0].cos()) * z[0].sin();
}

fn rhs_35(p: &[f64], z: &[f64], dz: &mut [f64]) {
    let tan = z[1].tan();
    // Guard the tan singularity: surface a blow-up instead of silent junk.
    dz[0] = if tan.abs() < 1e-9 {
        f64::NAN
    } else {
        z[0].cos() / tan
    };
    let (s, c) = (z[1].sin(), z[1].cos());
    dz[1] = z[0].sin() * (p[0] * s * s + c * c);
}

fn rhs_37(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = -p[0] * z[1] * (z[0] * z[0] - 1.0) - z[0];
}

fn rhs_38(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = p[0] * (-z[0].powi(3) / 3.0 + z[0] + z[1]);
    dz[1] = -z[0] / p[0];
}

fn rhs_39(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = p[0] * z[1] + z[0] * z[0] * z[1] - z[0];
    dz[1] = -p[0] * z[0] + p[1] - z[0] * z[0] * z[1];
}

fn rhs_40(p: &[f64], z: &[f64], dz: &mut [f64]) {
    dz[0] = z[1];
    dz[1] = p[0] * z[1] * (1.0 - z[0] * z[0]) - z[0];
}

fn rhs_lv(p: &[f64], z: &[f64], dz: &mut [f64]) {
    // ẋ = αx − βxy, ẏ = δxy − γy
    dz[0] = p[0] * z[0] - p[1] * z[0] * z[1];
    dz[1] = p[2] * z[0] * z[1] - p[3] * z[1];
}

fn reject_near_tan_singularity(z0: &[f64]) -> bool {
    z0[1].abs() < 0.05
}

/// The ten two-dimensional benchmark families by their source identifier.
pub fn ode_family(id: u32) -> Result<OdeFamily> {
    let fam = match id {
        24 => OdeFamily {
            ode_id: 24,
            name: "harmonic_oscillator",
            dim: 2,
            params: vec![2.1],
            ic_refs: [vec![0.4, -0.03], vec![0.0, 0.2]],
            horizon: 10.0,
            n_steps: 100,
            rhs: rhs_24,
            ic_reject: None,
        },
        25 => OdeFamily {
            ode_id: 25,
            name: "damped_oscillator",
            dim: 2,
            params: vec![4.5, 0.43],
            ic_refs: [vec![0.12, 0.043], vec![0.0, -0.3]],
            horizon: 8.0,
            n_steps: 100,
            rhs: rhs_25,
            ic_reject: None,
        },
        28 => OdeFamily {
            ode_id: 28,
            name: "pendulum",
            dim: 2,
            params: vec![0.9],
            ic_refs: [vec![-1.9, 0.0], vec![0.3, 0.8]],
            horizon: 15.0,
            n_steps: 100,
            rhs: rhs_28,
            ic_reject: None,
        },
        32 => OdeFamily {
            ode_id: 32,
            name: "damped_double_well",
            dim: 2,
            params: vec![0.18],
            ic_refs: [vec![-1.8, -1.8], vec![-2.8, 1.0]],
            horizon: 5.0,
            n_steps: 100,
            rhs: rhs_32,
            ic_reject: None,
        },
        34 => OdeFamily {
            ode_id: 34,
            name: "bead_on_rotating_hoop",
            dim: 2,
            params: vec![0.93],
            ic_refs: [vec![2.1, 0.0], vec![-1.2, -0.2]],
            horizon: 20.0,
            n_steps: 100,
            rhs: rhs_34,
            ic_reject: None,
        },
        35 => OdeFamily {
            ode_id: 35,
            name: "shear_flow_rotation",
            dim: 2,
            params: vec![4.2],
            ic_refs: [vec![1.13, -0.3], vec![0.7, -1.7]],
            horizon: 5.0,
            n_steps: 100,
            rhs: rhs_35,
            ic_reject: Some(reject_near_tan_singularity),
        },
        37 => OdeFamily {
            ode_id: 37,
            name: "van_der_pol",
            dim: 2,
            params: vec![0.43],
            ic_refs: [vec![2.2, 0.0], vec![0.1, 3.2]],
            horizon: 15.0,
            n_steps: 100,
            rhs: rhs_37,
            ic_reject: None,
        },
        38 => OdeFamily {
            ode_id: 38,
            name: "van_der_pol_simplified",
            dim: 2,
            params: vec![3.37],
            ic_refs: [vec![0.7, 0.0], vec![-1.1, -0.7]],
            horizon: 15.0,
            n_steps: 100,
            rhs: rhs_38,
            ic_reject: None,
        },
        39 => OdeFamily {
            ode_id: 39,
            name: "glycolytic_oscillator",
            dim: 2,
            params: vec![2.4, 0.07],
            ic_refs: [vec![0.4, 0.31], vec![0.2, -0.7]],
            horizon: 4.0,
            n_steps: 100,
            rhs: rhs_39,
            ic_reject: None,
        },
        40 => OdeFamily {
            ode_id: 40,
            name: "duffing",
            dim: 2,
            params: vec![0.886],
            ic_refs: [vec![0.63, -0.03], vec![0.2, 0.2]],
            horizon: 10.0,
            n_steps: 100,
            rhs: rhs_40,
            ic_reject: None,
        },
        other => {
            return Err(Error::config(format!("unknown ODE family id {other}")))
        }
    };
    Ok(fam)
}

/// Two-species predator–prey stand-in (repo-defined reference values,
/// not benchmark values).
pub fn lotka_volterra_family() -> OdeFamily {
    OdeFamily {
        ode_id: 1000,
        name: "lotka_volterra",
        dim: 2,
        params: vec![0.5, 0.5, 0.5, 0.5],
        ic_refs: [vec![1.0, 0.5], vec![2.0, 1.5]],
        horizon: 10.0,
        n_steps: 100,
        rhs: rhs_lv,
        ic_reject: None,
    }
}

const TEN_FAMILY_IDS: [u32; 10] = [24, 25, 28, 32, 34, 35, 37, 38, 39, 40];

/// Per-dimension uniform samples between the two reference conditions,
/// with the family's rejection rule applied.
pub fn sample_initial_conditions(
    family: &OdeFamily,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let z0: Vec<f64> = (0..family.dim)
            .map(|k| {
                let (a, b) = (family.ic_refs[0][k], family.ic_refs[1][k]);
                let (lo, hi) = (a.min(b), a.max(b));
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            })
            .collect();
        if let Some(reject) = family.ic_reject {
            if reject(&z0) {
                continue;
            }
        }
        out.push(z0);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    Train,
    Adapt,
}

fn even_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Parameter tuples for `n_envs` environments of one family.
///
/// Training scales span 90–110% of the reference: a per-parameter
/// Cartesian grid when `n_envs` is a perfect power of the parameter
/// count, otherwise `n_envs` points along the joint diagonal. Adaptation
/// scales are split between 80–87.5% and 112.5–120%, always outside the
/// training range, along the diagonal.
pub fn parameter_grid(family: &OdeFamily, n_envs: usize, mode: GridMode) -> Result<Vec<Vec<f64>>> {
    if n_envs == 0 {
        return Err(Error::config("parameter grid needs n_envs >= 1"));
    }
    let p = family.params.len();
    match mode {
        GridMode::Train => {
            if n_envs == 1 {
                return Ok(vec![family.params.clone()]);
            }
            // Perfect p-th root → Cartesian product of per-parameter grids.
            if p > 1 {
                let side = (n_envs as f64).powf(1.0 / p as f64).round() as usize;
                if side.pow(p as u32) == n_envs && side > 1 {
                    let axes: Vec<Vec<f64>> =
                        (0..p).map(|_| even_spaced(0.9, 1.1, side)).collect();
                    let mut tuples = vec![Vec::new()];
                    for axis in &axes {
                        let mut next = Vec::with_capacity(tuples.len() * axis.len());
                        for t in &tuples {
                            for &s in axis {
                                let mut t2 = t.clone();
                                t2.push(s);
                                next.push(t2);
                            }
                        }
                        tuples = next;
                    }
                    return Ok(tuples
                        .into_iter()
                        .map(|scales| {
                            scales
                                .iter()
                                .zip(&family.params)
                                .map(|(s, c)| s * c)
                                .collect()
                        })
                        .collect());
                }
            }
            Ok(even_spaced(0.9, 1.1, n_envs)
                .into_iter()
                .map(|s| family.params.iter().map(|c| s * c).collect())
                .collect())
        }
        GridMode::Adapt => {
            let n_low = n_envs / 2;
            let n_high = n_envs - n_low;
            let mut scales = even_spaced(1.125, 1.2, n_high);
            scales.extend(even_spaced(0.8, 0.875, n_low));
            Ok(scales
                .into_iter()
                .map(|s| family.params.iter().map(|c| s * c).collect())
                .collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    OdeBench10A,
    OdeBench10B,
    OdeBench2,
    Lv,
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odebench-10a" => Ok(Benchmark::OdeBench10A),
            "odebench-10b" => Ok(Benchmark::OdeBench10B),
            "odebench-2" => Ok(Benchmark::OdeBench2),
            "lv" => Ok(Benchmark::Lv),
            other => Err(Error::config(format!(
                "unknown benchmark `{other}` (expected odebench-10a|odebench-10b|odebench-2|lv)"
            ))),
        }
    }
}

impl std::fmt::Display for Benchmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Benchmark::OdeBench10A => "odebench-10a",
            Benchmark::OdeBench10B => "odebench-10b",
            Benchmark::OdeBench2 => "odebench-2",
            Benchmark::Lv => "lv",
        };
        f.write_str(s)
    }
}

impl Benchmark {
    /// Families plus their per-family training environment count.
    fn families(&self) -> Result<Vec<(OdeFamily, usize)>> {
        match self {
            Benchmark::OdeBench10A => TEN_FAMILY_IDS
                .iter()
                .map(|&id| Ok((ode_family(id)?, 5)))
                .collect(),
            Benchmark::OdeBench10B => TEN_FAMILY_IDS
                .iter()
                .map(|&id| Ok((ode_family(id)?, 16)))
                .collect(),
            Benchmark::OdeBench2 => {
                // Two contrasting families with benchmark-specific
                // parameter/horizon overrides.
                let mut damped = ode_family(25)?;
                damped.params[0] = 0.4;
                damped.ic_refs = [vec![0.1, 0.1], vec![0.0, -0.3]];
                damped.horizon = 5.0;
                let mut shear = ode_family(35)?;
                shear.params[0] = 6.0;
                shear.horizon = 5.0;
                Ok(vec![(damped, 5), (shear, 5)])
            }
            Benchmark::Lv => Ok(vec![(lotka_volterra_family(), 5)]),
        }
    }

    /// (train, test, adapt-train, adapt-test) trajectories per environment.
    fn split_counts(&self) -> (usize, usize, usize, usize) {
        (4, 32, 1, 32)
    }
}

fn integrate_env(
    family: &OdeFamily,
    params: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    let grid = family.grid();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut attempts = 0;
        let traj = loop {
            let z0 = sample_initial_conditions(family, 1, rng).pop().unwrap();
            match integrate_adaptive(
                |z, dz| family.rhs(params, z, dz),
                &z0,
                grid,
                GEN_RTOL,
                GEN_ATOL,
            ) {
                Ok(t) if t.is_finite() => break t,
                _ => {
                    attempts += 1;
                    if attempts >= IC_RETRIES {
                        return Err(Error::Generation {
                            family: family.name.to_string(),
                            reason: format!(
                                "no integrable initial condition in {IC_RETRIES} attempts \
                                 for params {params:?}"
                            ),
                        });
                    }
                }
            }
        };
        out.push(traj);
    }
    Ok(out)
}

/// Generate a full benchmark deterministically from a seed. Training
/// environments are shuffled before exposure so family blocks are not
/// contiguous.
pub fn generate(benchmark: Benchmark, seed: u64) -> Result<EnvironmentSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train_traj, n_test_traj, n_adapt_train, n_adapt_test) = benchmark.split_counts();
    let mut set = EnvironmentSet::new(benchmark.to_string(), seed);

    for (family_ord, (family, n_envs)) in benchmark.families()?.into_iter().enumerate() {
        for params in parameter_grid(&family, n_envs, GridMode::Train)? {
            let train = integrate_env(&family, &params, n_train_traj, &mut rng)?;
            let test = integrate_env(&family, &params, n_test_traj, &mut rng)?;
            set.push_train_env(
                train,
                test,
                EnvMeta {
                    family_ord,
                    ode_id: family.ode_id,
                    family_name: family.name.to_string(),
                    params,
                },
            );
        }
        for params in parameter_grid(&family, 1, GridMode::Adapt)? {
            let train = integrate_env(&family, &params, n_adapt_train, &mut rng)?;
            let test = integrate_env(&family, &params, n_adapt_test, &mut rng)?;
            set.push_adapt_env(
                train,
                test,
                EnvMeta {
                    family_ord,
                    ode_id: family.ode_id,
                    family_name: family.name.to_string(),
                    params,
                },
            );
        }
    }

    set.shuffle_train_envs(&mut rng);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn degenerate_reference_interval_collapses() {
        let mut fam = ode_family(24).unwrap();
        fam.ic_refs = [vec![0.0, 0.0], vec![0.0, 0.0]];
        let samples = sample_initial_conditions(&fam, 5, &mut rng(0));
        for s in samples {
            assert_eq!(s, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn initial_conditions_fall_in_the_reference_box() {
        let fam = ode_family(24).unwrap();
        for s in sample_initial_conditions(&fam, 200, &mut rng(1)) {
            assert!((0.0..=0.4).contains(&s[0]), "x0 {}", s[0]);
            assert!((-0.03..=0.2).contains(&s[1]), "x1 {}", s[1]);
        }
    }

    #[test]
    fn initial_condition_means_match_uniform_statistics() {
        let fam = ode_family(24).unwrap();
        let n = 10_000;
        let samples = sample_initial_conditions(&fam, n, &mut rng(2));
        for k in 0..2 {
            let (a, b) = (fam.ic_refs[0][k], fam.ic_refs[1][k]);
            let (lo, hi) = (a.min(b), a.max(b));
            let mid = 0.5 * (lo + hi);
            let width = hi - lo;
            let mean: f64 = samples.iter().map(|s| s[k]).sum::<f64>() / n as f64;
            // Std error of a uniform mean is width/√(12n).
            let se = width / (12.0 * n as f64).sqrt();
            assert!(
                (mean - mid).abs() < 3.0 * se,
                "dim {k}: mean {mean} vs mid {mid} (se {se})"
            );
        }
    }

    #[test]
    fn shear_flow_initial_conditions_avoid_singularity() {
        let fam = ode_family(35).unwrap();
        for s in sample_initial_conditions(&fam, 100, &mut rng(3)) {
            assert!(s[1].abs() >= 0.05);
        }
    }

    #[test]
    fn train_grid_single_env_is_reference() {
        let fam = ode_family(24).unwrap();
        let grid = parameter_grid(&fam, 1, GridMode::Train).unwrap();
        assert_eq!(grid, vec![vec![2.1]]);
    }

    #[test]
    fn train_grid_five_envs_matches_linspace() {
        let fam = ode_family(24).unwrap();
        let grid = parameter_grid(&fam, 5, GridMode::Train).unwrap();
        let expect = [1.89, 1.995, 2.1, 2.205, 2.31];
        assert_eq!(grid.len(), 5);
        for (g, e) in grid.iter().zip(expect) {
            assert!((g[0] - e).abs() < 1e-12, "{} vs {e}", g[0]);
        }
    }

    #[test]
    fn train_grid_sixteen_envs_two_params_is_cartesian() {
        let fam = ode_family(25).unwrap();
        let grid = parameter_grid(&fam, 16, GridMode::Train).unwrap();
        assert_eq!(grid.len(), 16);
        // 4 distinct values per parameter.
        let mut c0s: Vec<f64> = grid.iter().map(|g| g[0]).collect();
        c0s.sort_by(f64::total_cmp);
        c0s.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(c0s.len(), 4);
        let mut c1s: Vec<f64> = grid.iter().map(|g| g[1]).collect();
        c1s.sort_by(f64::total_cmp);
        c1s.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(c1s.len(), 4);
    }

    #[test]
    fn adapt_grid_is_disjoint_from_train_range() {
        for id in TEN_FAMILY_IDS {
            let fam = ode_family(id).unwrap();
            for n in [1, 4] {
                for params in parameter_grid(&fam, n, GridMode::Adapt).unwrap() {
                    for (p, c) in params.iter().zip(&fam.params) {
                        let scale = p / c;
                        assert!(
                            !(0.9..=1.1).contains(&scale),
                            "adapt scale {scale} overlaps the training range"
                        );
                        assert!((0.8 - 1e-12..=1.2 + 1e-12).contains(&scale));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_envs_is_a_config_error() {
        let fam = ode_family(24).unwrap();
        assert!(parameter_grid(&fam, 0, GridMode::Train).is_err());
    }

    #[test]
    fn all_family_rhs_match_independent_rk4() {
        // Adaptive ground truth vs fixed-step RK4 at a fine step on the
        // reference parameters, from the first reference condition.
        for id in TEN_FAMILY_IDS {
            let fam = ode_family(id).unwrap();
            let z0 = fam.ic_refs[0].clone();
            if let Some(reject) = fam.ic_reject {
                assert!(!reject(&z0));
            }
            let grid = fam.grid();
            let adaptive = integrate_adaptive(
                |z, dz| fam.rhs(&fam.params, z, dz),
                &z0,
                grid,
                GEN_RTOL,
                GEN_ATOL,
            )
            .unwrap();
            let fixed = crate::ode::integrate_rk4_plain(
                |z| {
                    let mut dz = vec![0.0; fam.dim];
                    fam.rhs(&fam.params, z.data(), &mut dz);
                    Ok(crate::tensor::Tensor::vector(dz))
                },
                &crate::tensor::Tensor::vector(z0.clone()),
                grid,
                20,
            )
            .unwrap();
            let mut max_err = 0.0f64;
            let mut max_abs = 0.0f64;
            for t in 0..=grid.n_steps {
                for j in 0..fam.dim {
                    max_err = max_err.max((adaptive.row(t)[j] - fixed[t].data()[j]).abs());
                    max_abs = max_abs.max(adaptive.row(t)[j].abs());
                }
            }
            assert!(
                max_err < 1e-4 * max_abs.max(1.0),
                "family {id}: max deviation {max_err}"
            );
        }
    }

    #[test]
    fn harmonic_family_matches_closed_form() {
        let fam = ode_family(24).unwrap();
        let omega = fam.params[0].sqrt();
        let z0 = vec![0.4, -0.03];
        let traj = integrate_adaptive(
            |z, dz| fam.rhs(&fam.params, z, dz),
            &z0,
            fam.grid(),
            GEN_RTOL,
            GEN_ATOL,
        )
        .unwrap();
        for (i, t) in fam.grid().times().enumerate() {
            let expect = 0.4 * (omega * t).cos() - (0.03 / omega) * (omega * t).sin();
            assert!((traj.row(i)[0] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn odebench2_counts_and_hidden_families() {
        let set = generate(Benchmark::OdeBench2, 0).unwrap();
        assert_eq!(set.n_train_envs(), 10);
        assert_eq!(set.n_adapt_envs(), 2);
        let labels = set.family_labels();
        assert_eq!(labels.iter().filter(|&&f| f == 0).count(), 5);
        assert_eq!(labels.iter().filter(|&&f| f == 1).count(), 5);
        let view = set.model_view();
        for env in &view {
            assert_eq!(env.train.len(), 4);
            assert_eq!(env.test.len(), 32);
            for t in env.train.iter().chain(&env.test) {
                assert_eq!(t.n_rows(), 101);
                assert!(t.is_finite());
            }
        }
    }

    #[test]
    fn same_seed_generates_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate(Benchmark::OdeBench2, 7).unwrap();
        let b = generate(Benchmark::OdeBench2, 7).unwrap();
        let pa = dir.path().join("a.mxds");
        let pb = dir.path().join("b.mxds");
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        // And a different seed differs.
        let c = generate(Benchmark::OdeBench2, 8).unwrap();
        let pc = dir.path().join("c.mxds");
        c.save(&pc).unwrap();
        assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pc).unwrap());
    }

    #[test]
    fn odebench10b_has_sixteen_envs_per_family() {
        let set = generate(Benchmark::OdeBench10B, 0).unwrap();
        assert_eq!(set.n_train_envs(), 160);
        assert_eq!(set.n_adapt_envs(), 10);
        let labels = set.family_labels();
        for fam in 0..10 {
            assert_eq!(labels.iter().filter(|&&f| f == fam).count(), 16);
        }
    }

    #[test]
    fn lv_benchmark_generates() {
        let set = generate(Benchmark::Lv, 1).unwrap();
        assert_eq!(set.n_train_envs(), 5);
        assert_eq!(set.n_adapt_envs(), 1);
        for env in set.model_view() {
            for t in env.train.iter().chain(&env.test) {
                assert!(t.is_finite());
                assert_eq!(t.n_rows(), 101);
            }
        }
    }
}
