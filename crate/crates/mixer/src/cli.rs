//! Batch-experiment entry points behind the `mixer` binary: dataset
//! generation, training runs, context adaptation, re-evaluation and plot
//! export. A run directory is self-contained: its config snapshot, the
//! dataset it references and its checkpoints reproduce every metric.
//!
//! Exit-code contract (kept stable for scripting): 0 success, 2
//! configuration or checkpoint problems, 3 data generation or format
//! problems, 4 training aborts.

use crate::backbones::{init_backbone, BackboneConfig, BackboneKind};
use crate::checkpoint::{
    load_json, save_json, shared_param_checksum, ModelCheckpoint, RunCheckpoint,
    CHECKPOINT_VERSION,
};
use crate::data::{EnvView, EnvironmentSet};
use crate::datagen::{generate, Benchmark};
use crate::error::{Error, Result};
use crate::metrics::{export_gating, rel_mse, trajectory_overlay_svg, EvalReport};
use crate::moe::ExpertBank;
use crate::rollout::{rollout_plain, unstack_rollout};
use crate::tensor::Tensor;
use crate::trainer::{
    adapt, evaluate, train, AdaptConfig, GateMode, HistoryRow, Model, TrainConfig, TrainState,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const TPRMSE_EPS: f64 = 0.1;

/// One experiment's full configuration, parsed from a flat
/// `key = value` file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub benchmark: String,
    pub dataset: PathBuf,
    pub backbone: BackboneKind,
    pub experts: usize,
    pub context_dim: usize,
    pub width: usize,
    pub split_contexts: bool,
    pub train: TrainConfig,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: String::new(),
            dataset: PathBuf::new(),
            backbone: BackboneKind::Lora,
            experts: 1,
            context_dim: 8,
            width: 64,
            split_contexts: true,
            train: TrainConfig::default(),
            adapt_steps: 250,
            adapt_lr: 3e-2,
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            rc.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        rc.validate()?;
        Ok(rc)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "benchmark" => self.benchmark = value.to_string(),
            "dataset" => self.dataset = PathBuf::from(value),
            "backbone" => self.backbone = value.parse()?,
            "experts" => self.experts = num(key, value)?,
            "context_dim" => self.context_dim = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "split_contexts" => self.split_contexts = num(key, value)?,
            "outer_iters" => self.train.outer_iters = num(key, value)?,
            "inner_iters_theta" => self.train.inner_iters_theta = num(key, value)?,
            "inner_iters_xi" => self.train.inner_iters_xi = num(key, value)?,
            "lr_theta" => self.train.lr_theta = num(key, value)?,
            "lr_xi" => self.train.lr_xi = num(key, value)?,
            "proximal_lambda" => self.train.proximal_lambda = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "gate_period" => self.train.gate_period = num(key, value)?,
            "val_period" => self.train.val_period = num(key, value)?,
            "substeps" => self.train.substeps = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "gate_mode" => self.train.gate_mode = value.parse()?,
            "sigma" => self.train.gating.noise_sigma = num(key, value)?,
            "kmeans_max_iters" => self.train.gating.kmeans_max_iters = num(key, value)?,
            "kmeans_tol" => self.train.gating.kmeans_tol = num(key, value)?,
            "instrument_sparsity" => self.train.instrument_sparsity = num(key, value)?,
            "adapt_steps" => self.adapt_steps = num(key, value)?,
            "adapt_lr" => self.adapt_lr = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => {
                return Err(Error::config(format!("unknown configuration key `{other}`")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.benchmark.is_empty() {
            return Err(Error::config("missing required key `benchmark`"));
        }
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::config("missing required key `dataset`"));
        }
        let _: Benchmark = self.benchmark.parse()?;
        if self.experts == 0 {
            return Err(Error::config("experts must be >= 1"));
        }
        if self.context_dim == 0 {
            return Err(Error::config("context_dim must be >= 1"));
        }
        if self.split_contexts && !self.context_dim.is_multiple_of(self.experts) {
            return Err(Error::config(format!(
                "context_dim {} not divisible by experts {} with split_contexts on",
                self.context_dim, self.experts
            )));
        }
        if self.train.outer_iters == 0 || self.train.substeps == 0 {
            return Err(Error::config("outer_iters and substeps must be >= 1"));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it back yields an
    /// identical configuration.
    pub fn render(&self) -> String {
        let gm = match self.train.gate_mode {
            GateMode::KmeansLeastSquares => "mixer",
            GateMode::Descent => "descent",
        };
        let mut s = String::new();
        let _ = writeln!(s, "benchmark = {}", self.benchmark);
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        let _ = writeln!(s, "backbone = {}", self.backbone);
        let _ = writeln!(s, "experts = {}", self.experts);
        let _ = writeln!(s, "context_dim = {}", self.context_dim);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "split_contexts = {}", self.split_contexts);
        let _ = writeln!(s, "outer_iters = {}", self.train.outer_iters);
        let _ = writeln!(s, "inner_iters_theta = {}", self.train.inner_iters_theta);
        let _ = writeln!(s, "inner_iters_xi = {}", self.train.inner_iters_xi);
        let _ = writeln!(s, "lr_theta = {}", self.train.lr_theta);
        let _ = writeln!(s, "lr_xi = {}", self.train.lr_xi);
        let _ = writeln!(s, "proximal_lambda = {}", self.train.proximal_lambda);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "gate_period = {}", self.train.gate_period);
        let _ = writeln!(s, "val_period = {}", self.train.val_period);
        let _ = writeln!(s, "substeps = {}", self.train.substeps);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "gate_mode = {gm}");
        let _ = writeln!(s, "sigma = {}", self.train.gating.noise_sigma);
        let _ = writeln!(s, "kmeans_max_iters = {}", self.train.gating.kmeans_max_iters);
        let _ = writeln!(s, "kmeans_tol = {}", self.train.gating.kmeans_tol);
        let _ = writeln!(s, "instrument_sparsity = {}", self.train.instrument_sparsity);
        let _ = writeln!(s, "adapt_steps = {}", self.adapt_steps);
        let _ = writeln!(s, "adapt_lr = {}", self.adapt_lr);
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub experts: Option<usize>,
    pub backbone: Option<BackboneKind>,
    pub outer_iters: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, rc: &mut RunConfig) {
        if let Some(seed) = self.seed {
            rc.train.seed = seed;
        }
        if let Some(out) = &self.out {
            rc.out = out.clone();
        }
        if let Some(experts) = self.experts {
            rc.experts = experts;
        }
        if let Some(backbone) = self.backbone {
            rc.backbone = backbone;
        }
        if let Some(outer) = self.outer_iters {
            rc.train.outer_iters = outer;
        }
    }
}

pub fn dataset_file_name(benchmark: &str, seed: u64) -> String {
    format!("{benchmark}-seed{seed}.mxds")
}

/// `generate`: write the dataset container and its manifest.
pub fn cmd_generate(benchmark: &str, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let tag: Benchmark = benchmark.parse()?;
    let set = generate(tag, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(dataset_file_name(benchmark, seed));
    set.save(&path)?;
    let manifest = set.manifest();
    std::fs::write(out_dir.join(format!("{benchmark}-seed{seed}.manifest.txt")), &manifest)?;
    print!("{manifest}");
    println!("wrote {}", path.display());
    Ok(path)
}

/// Build the expert bank described by a run configuration. All experts
/// share the same initialization seed; they differentiate through the
/// context slices and shifts they receive.
pub fn build_model(rc: &RunConfig, data: &[EnvView]) -> Result<Model> {
    let state_dim = data
        .first()
        .and_then(|e| e.train.first())
        .map(|t| t.dim())
        .ok_or_else(|| Error::config("dataset has no training trajectories"))?;
    let per_expert_ctx = if rc.split_contexts {
        rc.context_dim / rc.experts
    } else {
        rc.context_dim
    };
    let bb = BackboneConfig::new(rc.backbone, state_dim, per_expert_ctx).with_width(rc.width);
    let experts = (0..rc.experts)
        .map(|_| init_backbone(&bb, rc.train.seed))
        .collect();
    let bank = ExpertBank::new(experts, rc.split_contexts);
    Ok(Model::new(bank, rc.context_dim, data.len()))
}

fn load_dataset(rc: &RunConfig) -> Result<EnvironmentSet> {
    let set = EnvironmentSet::load(&rc.dataset)?;
    if set.benchmark != rc.benchmark {
        return Err(Error::config(format!(
            "dataset is `{}` but the config says `{}`",
            set.benchmark, rc.benchmark
        )));
    }
    Ok(set)
}

fn history_csv_rows(history: &[HistoryRow]) -> String {
    let mut out = String::new();
    for row in history {
        let routing: Vec<String> = row.routing.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{:?},{:?},{}",
            row.outer_iter,
            row.train_mse,
            row.val_relmse,
            routing.join("-")
        );
    }
    out
}

fn run_report(model: &Model, set: &EnvironmentSet, rc: &RunConfig) -> Result<EvalReport> {
    let data = set.model_view();
    let mut report = evaluate(model, &data, rc.train.substeps, TPRMSE_EPS)?;
    if model.bank.n_experts() >= set.n_families() {
        report.purity = Some(crate::metrics::routing_purity(
            &report.routing,
            &set.family_labels(),
        )?);
    }
    Ok(report)
}

fn log_line(run_dir: &Path, msg: &str) {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let line = format!("[{stamp}] {msg}\n");
    let _ = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join("run.log"))
        .and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes()));
}

/// `train`: run (or resume) an experiment into its run directory.
pub fn cmd_train(config_path: &Path, overrides: &TrainOverrides, resume: bool) -> Result<PathBuf> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut rc = RunConfig::parse(&text)?;
    overrides.apply(&mut rc);
    rc.validate()?;

    let set = load_dataset(&rc)?;
    let data = set.model_view();
    let run_dir = rc.out.clone();
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.txt"), rc.render())?;

    let resume_state: Option<TrainState> = if resume {
        let cp: RunCheckpoint = load_json(&run_dir.join("checkpoint_last.json"))?;
        Some(cp.state)
    } else {
        None
    };

    let model = build_model(&rc, &data)?;
    log_line(&run_dir, &format!("train start (resume = {resume})"));
    let out = train(&data, model, &rc.train, resume_state)?;
    log_line(&run_dir, "train done");

    // Metrics table: append on resume, rewrite otherwise.
    let csv_path = run_dir.join("metrics.csv");
    let mut csv = if resume && csv_path.exists() {
        std::fs::read_to_string(&csv_path)?
    } else {
        String::from("iter,train_mse,val_relmse,routing\n")
    };
    csv.push_str(&history_csv_rows(&out.history));
    std::fs::write(&csv_path, csv)?;

    let best_model = out
        .state
        .best_model
        .clone()
        .unwrap_or_else(|| out.state.model.clone());
    save_json(
        &run_dir.join("checkpoint_last.json"),
        &RunCheckpoint {
            version: CHECKPOINT_VERSION,
            state: out.state,
        },
    )?;
    save_json(
        &run_dir.join("checkpoint_best.json"),
        &ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            model: best_model.clone(),
        },
    )?;

    export_gating(&best_model.gate, &best_model.contexts, &run_dir)?;
    let report = run_report(&best_model, &set, &rc)?;
    save_json(&run_dir.join("report.json"), &report)?;
    println!(
        "run {}: train_relmse {:.6e}, test_relmse {:.6e}, tprmse {:.1}%{}",
        run_dir.display(),
        report.train_relmse,
        report.test_relmse,
        report.tprmse,
        report
            .purity
            .map(|p| format!(", purity {p:.3}"))
            .unwrap_or_default()
    );
    Ok(run_dir)
}

fn load_run(run_dir: &Path) -> Result<(RunConfig, EnvironmentSet, Model)> {
    let text = std::fs::read_to_string(run_dir.join("config.txt"))
        .map_err(|e| Error::config(format!("no config.txt in {}: {e}", run_dir.display())))?;
    let rc = RunConfig::parse(&text)?;
    let set = load_dataset(&rc)?;
    let cp: ModelCheckpoint = load_json(&run_dir.join("checkpoint_best.json"))?;
    Ok((rc, set, cp.model))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptEnvReport {
    pub env: usize,
    pub routing: usize,
    pub adapt_test_relmse: f64,
    pub context: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptReport {
    pub checksum_before: String,
    pub checksum_after: String,
    pub frozen: bool,
    pub envs: Vec<AdaptEnvReport>,
}

/// `adapt`: fit fresh contexts to every adaptation environment with the
/// shared parameters frozen, then score the adaptation test split.
pub fn cmd_adapt(run_dir: &Path, steps_override: Option<usize>) -> Result<AdaptReport> {
    let (rc, set, model) = load_run(run_dir)?;
    let adapt_envs = set.adapt_view();
    if adapt_envs.is_empty() {
        return Err(Error::config("dataset has no adaptation environments"));
    }
    let cfg = AdaptConfig {
        steps: steps_override.unwrap_or(rc.adapt_steps),
        lr: rc.adapt_lr,
        substeps: rc.train.substeps,
    };

    let before = shared_param_checksum(&model);
    let mut envs = Vec::with_capacity(adapt_envs.len());
    for (e, env) in adapt_envs.iter().enumerate() {
        let result = adapt(&model, env, &cfg)?;
        let m = result.routing;
        let xi_m = model.bank.expert_input(&result.context, m)?;
        let field = model.bank.experts[m].bind_plain(&xi_m)?;
        let relmse = match rollout_plain(&field, &env.test, cfg.substeps) {
            Ok(pred) => {
                let grid = env.test[0].grid;
                let mut pairs_owned = Vec::new();
                for t in 1..=grid.n_steps {
                    pairs_owned.push((pred[t].clone(), crate::rollout::stack_row(&env.test, t)));
                }
                let pairs: Vec<(&Tensor, &Tensor)> =
                    pairs_owned.iter().map(|(p, t)| (p, t)).collect();
                rel_mse(&pairs)?
            }
            Err(Error::IntegrationBlowUp { .. }) => f64::INFINITY,
            Err(other) => return Err(other),
        };
        envs.push(AdaptEnvReport {
            env: e,
            routing: m,
            adapt_test_relmse: relmse,
            context: result.context,
        });
    }
    let after = shared_param_checksum(&model);

    let report = AdaptReport {
        checksum_before: format!("{before:016x}"),
        checksum_after: format!("{after:016x}"),
        frozen: before == after,
        envs,
    };
    save_json(&run_dir.join("adapt_report.json"), &report)?;
    println!(
        "frozen: {}",
        if report.frozen { "ok" } else { "VIOLATED" }
    );
    for env in &report.envs {
        println!(
            "adapt env {}: expert {}, adapt-test relmse {:.6e}",
            env.env, env.routing, env.adapt_test_relmse
        );
    }
    Ok(report)
}

/// `eval`: recompute the final report from the best checkpoint.
pub fn cmd_eval(run_dir: &Path) -> Result<EvalReport> {
    let (rc, set, model) = load_run(run_dir)?;
    let report = run_report(&model, &set, &rc)?;
    save_json(&run_dir.join("eval_report.json"), &report)?;
    println!(
        "eval {}: train_relmse {:.6e}, test_relmse {:.6e}, tprmse {:.1}%{}",
        run_dir.display(),
        report.train_relmse,
        report.test_relmse,
        report.tprmse,
        report
            .purity
            .map(|p| format!(", purity {p:.3}"))
            .unwrap_or_default()
    );
    Ok(report)
}

/// `plot`: gating heatmap/histogram plus one true-vs-predicted overlay per
/// family (its first exposed environment, first held-out trajectory).
pub fn cmd_plot(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let (rc, set, model) = load_run(run_dir)?;
    export_gating(&model.gate, &model.contexts, run_dir)?;
    let mut written = vec![
        run_dir.join("gating_heatmap.csv"),
        run_dir.join("gating_histogram.csv"),
        run_dir.join("gating_heatmap.svg"),
    ];

    let data = set.model_view();
    let labels = set.family_labels();
    let n_families = set.n_families();
    for fam in 0..n_families {
        let Some(e) = labels.iter().position(|&f| f == fam) else {
            continue;
        };
        let env = &data[e];
        let Some(truth) = env.test.first() else {
            continue;
        };
        let m = model.gate.route(&model.contexts[e])?;
        let xi_m = model.bank.expert_input(&model.contexts[e], m)?;
        let field = model.bank.experts[m].bind_plain(&xi_m)?;
        let pred = match rollout_plain(&field, std::slice::from_ref(truth), rc.train.substeps) {
            Ok(p) => unstack_rollout(&p, truth.grid).remove(0),
            Err(Error::IntegrationBlowUp { .. }) => continue,
            Err(other) => return Err(other),
        };
        let path = run_dir.join(format!("overlay_family_{fam}.svg"));
        std::fs::write(&path, trajectory_overlay_svg(truth, &pred))?;
        written.push(path);
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

/// Exit code for the binary's error paths.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Generation { .. }
        | Error::DataFormat(_)
        | Error::DataVersion { .. }
        | Error::DataTruncated(_) => 3,
        Error::TrainingAborted { .. }
        | Error::IntegrationBlowUp { .. }
        | Error::StepSizeUnderflow { .. } => 4,
        _ => 1,
    }
}
