//! Evaluation metrics and gating diagnostics.
//!
//! All metrics are plain functions over states; callers decide which rows
//! of a trajectory to include (training code skips the shared initial row).

use crate::error::{Error, Result};
use crate::moe::Gate;
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Norm floor below which a true state is excluded from relative errors.
pub const REL_MSE_NORM_FLOOR: f64 = 1e-6;

/// Evaluation summary of a trained model over one environment set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Relative MSE on the training trajectories.
    pub train_relmse: f64,
    /// Relative MSE on the held-out trajectories.
    pub test_relmse: f64,
    pub per_env_test_relmse: Vec<f64>,
    /// Percentage of environments with test relative MSE below 0.1.
    pub tprmse: f64,
    /// Family↔expert matching score; present only when family metadata is
    /// available and the expert count covers the families.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    pub routing: Vec<usize>,
}

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: pred.shape(),
            rhs: truth.shape(),
        });
    }
    Ok(())
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(c) => (1, c),
        Shape::Scalar => (1, 1),
    }
}

/// Mean over all rows of all pairs of the squared L2 row error. Each pair
/// is one (predicted, true) state matrix of matching shape, one row per
/// included time step.
pub fn mse_loss(pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (pred, truth) in pairs {
        check_pair(pred, truth)?;
        let (rows, cols) = rows_of(truth);
        for r in 0..rows {
            let mut row_err = 0.0;
            for c in 0..cols {
                let d = pred.at(r, c) - truth.at(r, c);
                row_err += d * d;
            }
            acc += row_err;
        }
        count += rows;
    }
    if count == 0 {
        return Err(Error::EmptyMetric("mse over zero steps".into()));
    }
    Ok(acc / count as f64)
}

/// Sum and count of per-step relative squared errors, excluding steps
/// whose true norm is at or below [`REL_MSE_NORM_FLOOR`].
pub fn rel_mse_parts(pairs: &[(&Tensor, &Tensor)]) -> Result<(f64, usize)> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (pred, truth) in pairs {
        check_pair(pred, truth)?;
        let (rows, cols) = rows_of(truth);
        for r in 0..rows {
            let mut err = 0.0;
            let mut norm = 0.0;
            for c in 0..cols {
                let d = pred.at(r, c) - truth.at(r, c);
                err += d * d;
                norm += truth.at(r, c) * truth.at(r, c);
            }
            if norm.sqrt() > REL_MSE_NORM_FLOOR {
                acc += err / norm;
                count += 1;
            }
        }
    }
    Ok((acc, count))
}

/// Mean relative squared error over included steps; an error when every
/// step is excluded by the norm floor.
pub fn rel_mse(pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let (acc, count) = rel_mse_parts(pairs)?;
    if count == 0 {
        return Err(Error::EmptyMetric(
            "all steps excluded by the relative-MSE norm floor".into(),
        ));
    }
    Ok(acc / count as f64)
}

/// Percentage of environments with relative MSE strictly below `eps`.
pub fn tprmse(per_env_relmse: &[f64], eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "threshold must be positive");
    if per_env_relmse.is_empty() {
        return Err(Error::EmptyMetric("tprmse over zero environments".into()));
    }
    let hits = per_env_relmse.iter().filter(|&&v| v < eps).count();
    Ok(100.0 * hits as f64 / per_env_relmse.len() as f64)
}

/// Fraction of environments whose routed expert matches their family under
/// the best injective family↔expert matching. When there are more families
/// than experts the matching is partial and unmatched families score zero.
pub fn routing_purity(routing: &[usize], families: &[usize]) -> Result<f64> {
    if routing.len() != families.len() || routing.is_empty() {
        return Err(Error::EmptyMetric(
            "purity needs aligned non-empty routing and family labels".into(),
        ));
    }
    let n_fam = families.iter().max().unwrap() + 1;
    let n_exp = routing.iter().max().unwrap() + 1;
    assert!(
        n_exp <= 20,
        "purity matching is exhaustive; expert count {n_exp} too large"
    );

    // count[f][m] = environments of family f routed to expert m.
    let mut count = vec![vec![0usize; n_exp]; n_fam];
    for (&m, &f) in routing.iter().zip(families) {
        count[f][m] += 1;
    }

    // Best injective assignment family→expert by bitmask DP over experts.
    let full = 1usize << n_exp;
    let mut best = vec![vec![0usize; full]; n_fam + 1];
    for f in (0..n_fam).rev() {
        for mask in 0..full {
            // Leave family f unmatched…
            let mut b = best[f + 1][mask];
            // …or match it to any free expert.
            for m in 0..n_exp {
                if mask & (1 << m) == 0 {
                    b = b.max(count[f][m] + best[f + 1][mask | (1 << m)]);
                }
            }
            best[f][mask] = b;
        }
    }
    Ok(best[0][0] as f64 / routing.len() as f64)
}

/// Write the gating diagnostics: the per-environment logits matrix as CSV,
/// the argmax histogram as CSV, and a grid-cell SVG heatmap.
pub fn export_gating(gate: &Gate, contexts: &[Tensor], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let m = gate.n_experts();

    let mut logits_rows: Vec<Vec<f64>> = Vec::with_capacity(contexts.len());
    let mut histogram = vec![0usize; m];
    for xi in contexts {
        let logits = gate.logits(xi)?;
        histogram[crate::moe::argmax(logits.data())] += 1;
        logits_rows.push(logits.data().to_vec());
    }

    let mut csv = String::from("env");
    for j in 0..m {
        csv.push_str(&format!(",logit_{j}"));
    }
    csv.push('\n');
    for (e, row) in logits_rows.iter().enumerate() {
        csv.push_str(&e.to_string());
        for v in row {
            csv.push_str(&format!(",{v:?}"));
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("gating_heatmap.csv"), csv)?;

    let mut hist_csv = String::from("expert,count\n");
    for (j, c) in histogram.iter().enumerate() {
        hist_csv.push_str(&format!("{j},{c}\n"));
    }
    std::fs::write(dir.join("gating_histogram.csv"), hist_csv)?;

    std::fs::write(
        dir.join("gating_heatmap.svg"),
        heatmap_svg(&logits_rows, m),
    )?;
    Ok(())
}

/// Parse a `gating_heatmap.csv` back into its logit rows.
pub fn parse_gating_csv(contents: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for line in contents.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(cells.len() - 1);
        for cell in &cells[1..] {
            row.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::DataFormat(format!("bad csv float `{cell}`: {e}")))?,
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

fn heatmap_svg(rows: &[Vec<f64>], m: usize) -> String {
    let cell = 18;
    let width = m * cell + 40;
    let height = rows.len() * cell + 20;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in rows {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    for (e, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = (v - lo) / span;
            let r = (255.0 * t) as u8;
            let b = (255.0 * (1.0 - t)) as u8;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({r},60,{b})\"/>\n",
                30 + j * cell,
                10 + e * cell,
                cell - 1,
                cell - 1,
            ));
        }
        svg.push_str(&format!(
            "<text x=\"2\" y=\"{}\" font-size=\"10\">{e}</text>\n",
            22 + e * cell
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Simple polyline overlay of true vs. predicted trajectories, one panel
/// per state dimension.
pub fn trajectory_overlay_svg(truth: &crate::ode::Trajectory, pred: &crate::ode::Trajectory) -> String {
    let d = truth.dim();
    let (w, h) = (360usize, 120usize);
    let total_h = d * (h + 10) + 10;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{total_h}\">\n"
    );
    for dim in 0..d {
        let y0 = 10 + dim * (h + 10);
        let series: Vec<(&Tensor, &str)> = vec![
            (&truth.states, "black"),
            (&pred.states, "crimson"),
        ];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (states, _) in &series {
            for r in 0..states.shape().rows() {
                lo = lo.min(states.at(r, dim));
                hi = hi.max(states.at(r, dim));
            }
        }
        let span = (hi - lo).max(1e-12);
        for (states, color) in &series {
            let rows = states.shape().rows();
            let pts: Vec<String> = (0..rows)
                .map(|r| {
                    let x = r as f64 / (rows - 1).max(1) as f64 * (w as f64 - 20.0) + 10.0;
                    let y = y0 as f64 + (1.0 - (states.at(r, dim) - lo) / span) * h as f64;
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
