//! Sparse top-1 mixture layer: a linear gate routes each environment's
//! context to exactly one expert reconstructor, and the gate itself is
//! refreshed by K-means clustering of the contexts followed by a
//! least-squares fit — never by gradient descent.
//!
//! The update composes four stages: cluster the contexts, score every
//! expert on every environment, pair clusters with experts by median loss,
//! then solve for gate weights that reproduce the pairing. It reads but
//! never mutates the experts or the contexts.

use crate::backbones::Backbone;
use crate::data::EnvView;
use crate::error::{Error, Result};
use crate::linalg::ridge_least_squares;
use crate::rollout::rollout_mse_plain;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const KMEANS_MAX_ITERS: usize = 20;
pub const KMEANS_TOL: f64 = 1e-3;
pub const GATE_NOISE_SIGMA: f64 = 1e-4;
pub const GATE_RIDGE: f64 = 1e-8;

/// Linear routing gate: logits `g = ξ·W + b`, expert = argmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    /// `d_ξ × M` weights.
    pub w: Tensor,
    /// Length-`M` bias.
    pub b: Tensor,
}

impl Gate {
    /// Zero gate: all logits equal, so everything routes to expert 0.
    pub fn zeros(context_dim: usize, n_experts: usize) -> Gate {
        Gate {
            w: Tensor::zeros(Shape::Matrix(context_dim, n_experts)),
            b: Tensor::zeros(Shape::Vector(n_experts)),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.b.len()
    }

    pub fn logits(&self, xi: &Tensor) -> Result<Tensor> {
        xi.matmul(&self.w)?.add(&self.b)
    }

    /// Argmax over logits, ties broken by the lowest expert index.
    pub fn route(&self, xi: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(xi)?.data()))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The experts plus their context-side transforms: optional splitting of
/// the context into equal per-expert segments, and a per-expert scalar
/// shift. The shifts are trained together with the expert weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub experts: Vec<Backbone>,
    pub offsets: Vec<f64>,
    pub split_contexts: bool,
}

impl ExpertBank {
    pub fn new(experts: Vec<Backbone>, split_contexts: bool) -> ExpertBank {
        let offsets = vec![0.0; experts.len()];
        ExpertBank {
            experts,
            offsets,
            split_contexts,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Context slice seen by expert `m`: segment `m` of `M` equal pieces
    /// when splitting, otherwise the full context; shifted by `offsets[m]`.
    pub fn expert_input(&self, xi: &Tensor, m: usize) -> Result<Tensor> {
        let sliced = self.split(xi, m)?;
        Ok(sliced.map(|v| v + self.offsets[m]))
    }

    fn split(&self, xi: &Tensor, m: usize) -> Result<Tensor> {
        if !self.split_contexts {
            return Ok(xi.clone());
        }
        let me = self.n_experts();
        let d = xi.len();
        if !d.is_multiple_of(me) {
            return Err(Error::config(format!(
                "context length {d} not divisible by {me} experts for splitting"
            )));
        }
        let piece = d / me;
        xi.slice(m * piece, piece)
    }

    /// Tape analog of [`ExpertBank::expert_input`]; the offset is supplied
    /// as a lifted scalar so it receives gradients.
    pub fn expert_input_var(
        &self,
        xi: &crate::autodiff::Var,
        offset: &crate::autodiff::Var,
        m: usize,
    ) -> Result<crate::autodiff::Var> {
        let sliced = if self.split_contexts {
            let me = self.n_experts();
            let d = xi.shape().len();
            if !d.is_multiple_of(me) {
                return Err(Error::config(format!(
                    "context length {d} not divisible by {me} experts for splitting"
                )));
            }
            let piece = d / me;
            xi.slice(m * piece, piece)?
        } else {
            xi.clone()
        };
        sliced.add(offset)
    }

    /// Active parameters of a single expert (its arrays plus the offset).
    pub fn active_param_count(&self) -> usize {
        self.experts[0].param_count() + 1
    }
}

/// Cost bookkeeping for one Lloyd iteration: the total L1 cost of the
/// previous assignment evaluated under the centroids in force (`+∞` on the
/// first iteration, where no assignment exists yet), and the cost right
/// after reassignment. Reassignment is an argmin per point, so
/// `reassigned <= stale` always.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LloydCost {
    pub stale: f64,
    pub reassigned: f64,
}

/// Result of Lloyd's iterations over the context matrix. `centroids` is
/// `None` when a cluster emptied mid-iteration; the partial assignment
/// is still returned.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Option<Tensor>,
    pub iterations: usize,
    /// Per-iteration assignment costs; see [`LloydCost`].
    pub cost_trace: Vec<LloydCost>,
}

/// Lloyd's K-means under the L1 distance with mean centroid updates.
/// Missing initial centroids are drawn uniformly from `[0, 1)`.
pub fn kmeans(
    contexts: &Tensor,
    init_centroids: Option<Tensor>,
    n_clusters: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Clustering {
    let (e, d) = match contexts.shape() {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(c) => (1, c),
        Shape::Scalar => (1, 1),
    };
    assert!(e >= 1, "kmeans requires at least one context");

    let mut centroids = init_centroids.unwrap_or_else(|| {
        Tensor::matrix(
            n_clusters,
            d,
            (0..n_clusters * d).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    });

    let mut assignment = vec![0usize; e];
    let mut cost_trace: Vec<LloydCost> = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iters {
        // Cost of keeping the previous assignment under current centroids.
        let stale = if iter == 0 {
            f64::INFINITY
        } else {
            (0..e)
                .map(|i| l1(contexts.row(i), centroids.row(assignment[i])))
                .sum()
        };

        // Assign by L1 distance, lowest index on ties.
        let mut cost = 0.0;
        for i in 0..e {
            let row = contexts.row(i);
            let mut best = 0;
            let mut best_d = l1(row, centroids.row(0));
            for j in 1..n_clusters {
                let dist = l1(row, centroids.row(j));
                if dist < best_d {
                    best = j;
                    best_d = dist;
                }
            }
            assignment[i] = best;
            cost += best_d;
        }
        cost_trace.push(LloydCost {
            stale,
            reassigned: cost,
        });

        let mut counts = vec![0usize; n_clusters];
        for &a in &assignment {
            counts[a] += 1;
        }
        if counts.contains(&0) {
            return Clustering {
                assignment,
                centroids: None,
                iterations,
                cost_trace,
            };
        }

        // Mean update, then convergence on max centroid movement.
        let mut new_data = vec![0.0; n_clusters * d];
        for i in 0..e {
            let a = assignment[i];
            for (j, &v) in contexts.row(i).iter().enumerate() {
                new_data[a * d + j] += v;
            }
        }
        for m in 0..n_clusters {
            for j in 0..d {
                new_data[m * d + j] /= counts[m] as f64;
            }
        }
        let new_centroids = Tensor::matrix(n_clusters, d, new_data);
        let movement = (0..n_clusters)
            .map(|m| l1(centroids.row(m), new_centroids.row(m)))
            .fold(0.0, f64::max);
        centroids = new_centroids;
        iterations += 1;
        if movement < tol {
            break;
        }
    }

    Clustering {
        assignment,
        centroids: Some(centroids),
        iterations,
        cost_trace,
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Worker threads for the loss matrix, from `MIXER_THREADS` (default:
/// available parallelism). Entries are independent, so the result does
/// not depend on the thread count.
fn loss_matrix_threads() -> usize {
    static THREADS: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("MIXER_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}

fn loss_matrix_entry(
    bank: &ExpertBank,
    contexts: &[Tensor],
    data: &[EnvView],
    substeps: usize,
    m: usize,
    e: usize,
) -> Result<f64> {
    let xi_m = bank.expert_input(&contexts[e], m)?;
    let field = bank.experts[m].bind_plain(&xi_m)?;
    match rollout_mse_plain(&field, &data[e].train, substeps) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Ok(f64::INFINITY),
        Err(Error::IntegrationBlowUp { .. }) => Ok(f64::INFINITY),
        Err(other) => Err(other),
    }
}

/// Per-expert per-environment training loss: entry `(m, e)` is the
/// reconstruction MSE of expert `m` on environment `e`'s training
/// trajectories through that expert's view of the context. Integration
/// blow-ups become `+∞` entries. Entries are evaluated in parallel when
/// `MIXER_THREADS` allows.
pub fn loss_matrix(
    bank: &ExpertBank,
    contexts: &[Tensor],
    data: &[EnvView],
    substeps: usize,
) -> Result<Tensor> {
    let m_count = bank.n_experts();
    let e_count = data.len();
    let total = m_count * e_count;
    let threads = loss_matrix_threads().min(total).max(1);

    if threads == 1 {
        let mut out = vec![0.0; total];
        for m in 0..m_count {
            for e in 0..e_count {
                out[m * e_count + e] = loss_matrix_entry(bank, contexts, data, substeps, m, e)?;
            }
        }
        return Ok(Tensor::matrix(m_count, e_count, out));
    }

    let mut out = vec![0.0; total];
    let chunk = total.div_ceil(threads);
    let result: Result<()> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (t, slot) in out.chunks_mut(chunk).enumerate() {
            let start = t * chunk;
            handles.push(scope.spawn(move || -> Result<()> {
                for (offset, cell) in slot.iter_mut().enumerate() {
                    let idx = start + offset;
                    let (m, e) = (idx / e_count, idx % e_count);
                    *cell = loss_matrix_entry(bank, contexts, data, substeps, m, e)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("loss matrix worker panicked")?;
        }
        Ok(())
    });
    result?;
    Ok(Tensor::matrix(m_count, e_count, out))
}

/// Injective cluster→expert pairing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingResult {
    /// `selected[c]` is the expert serving cluster `c`.
    pub selected: Vec<usize>,
}

/// Pair each cluster (in index order) with its best unclaimed expert,
/// ranked by the elementwise median loss over the cluster's members.
/// Empty clusters rank every expert at `+∞` and take a leftover.
pub fn pair_experts(losses: &Tensor, clustering: &Clustering) -> PairingResult {
    let (m_count, e_count) = match losses.shape() {
        Shape::Matrix(r, c) => (r, c),
        _ => unreachable!("loss matrix is rank 2"),
    };
    let mut selected: Vec<usize> = Vec::with_capacity(m_count);
    for c in 0..m_count {
        let members: Vec<usize> = (0..e_count)
            .filter(|&e| clustering.assignment[e] == c)
            .collect();
        let medians: Vec<f64> = (0..m_count)
            .map(|m| {
                if members.is_empty() {
                    f64::INFINITY
                } else {
                    median(members.iter().map(|&e| losses.at(m, e)))
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..m_count).collect();
        order.sort_by(|&a, &b| medians[a].total_cmp(&medians[b]).then(a.cmp(&b)));
        let pick = order
            .into_iter()
            .find(|m| !selected.contains(m))
            .expect("fewer clusters than experts cannot happen");
        selected.push(pick);
    }
    PairingResult { selected }
}

/// Median with the even-size convention of averaging the two middle values.
fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fit the gate by ridge least squares on noisy contexts against one-hot
/// labels derived from the pairing: environments of cluster `c` are
/// labeled with expert `selected[c]`.
pub fn fit_gate(
    contexts: &[Tensor],
    pairing: &PairingResult,
    clustering: &Clustering,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Gate> {
    let e_count = contexts.len();
    let d = contexts[0].len();
    let m_count = pairing.selected.len();

    let mut x = Vec::with_capacity(e_count * (d + 1));
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|_| Error::config("bad sigma"))?;
    for xi in contexts {
        for &v in xi.data() {
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            x.push(v + n);
        }
        x.push(1.0);
    }
    let design = Tensor::matrix(e_count, d + 1, x);

    let mut y = vec![0.0; e_count * m_count];
    for (e, &c) in clustering.assignment.iter().enumerate() {
        y[e * m_count + pairing.selected[c]] = 1.0;
    }
    let labels = Tensor::matrix(e_count, m_count, y);

    let solution = ridge_least_squares(&design, &labels, GATE_RIDGE)?;
    let w = Tensor::matrix(d, m_count, solution.data()[..d * m_count].to_vec());
    let b = Tensor::vector(solution.data()[d * m_count..].to_vec());
    Ok(Gate { w, b })
}

/// Knobs of the gating update.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GatingConfig {
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub noise_sigma: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            kmeans_max_iters: KMEANS_MAX_ITERS,
            kmeans_tol: KMEANS_TOL,
            noise_sigma: GATE_NOISE_SIGMA,
        }
    }
}

/// One full gating refresh: cluster → score → pair → fit. Returns the new
/// gate and the centroids to seed the next call (`None` propagates an
/// empty-cluster event, forcing a random re-seed next time). Experts and
/// contexts are read-only here.
pub fn gating_update(
    bank: &ExpertBank,
    contexts: &[Tensor],
    data: &[EnvView],
    prev_centroids: Option<&Tensor>,
    cfg: &GatingConfig,
    substeps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Gate, Option<Tensor>)> {
    let d = contexts[0].len();
    let stacked = Tensor::matrix(
        contexts.len(),
        d,
        contexts.iter().flat_map(|c| c.data().iter().copied()).collect(),
    );
    let clustering = kmeans(
        &stacked,
        prev_centroids.cloned(),
        bank.n_experts(),
        cfg.kmeans_max_iters,
        cfg.kmeans_tol,
        rng,
    );
    let losses = loss_matrix(bank, contexts, data, substeps)?;
    let pairing = pair_experts(&losses, &clustering);
    let gate = fit_gate(contexts, &pairing, &clustering, cfg.noise_sigma, rng)?;
    Ok((gate, clustering.centroids))
}
