use clap::{Parser, Subcommand};
use mixer::cli::{self, TrainOverrides};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mixer",
    about = "Top-1 mixture of expert reconstructors for families of dynamical systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a benchmark dataset and its manifest.
    Generate {
        /// odebench-10a | odebench-10b | odebench-2 | lv
        #[arg(long)]
        benchmark: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a run from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        experts: Option<usize>,
        /// concat | hypernet | lora
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        outer_iters: Option<usize>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Fit contexts to the adaptation environments of a finished run.
    Adapt {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Recompute the final report from a run's best checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Export gating heatmap/histogram and per-family overlays.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cmd: Cmd) -> mixer::Result<()> {
    match cmd {
        Cmd::Generate { benchmark, seed, out } => {
            cli::cmd_generate(&benchmark, seed, &out)?;
        }
        Cmd::Train {
            config,
            seed,
            out,
            experts,
            backbone,
            outer_iters,
            resume,
        } => {
            let overrides = TrainOverrides {
                seed,
                out,
                experts,
                backbone: backbone.map(|b| b.parse()).transpose()?,
                outer_iters,
            };
            cli::cmd_train(&config, &overrides, resume)?;
        }
        Cmd::Adapt { run, steps } => {
            cli::cmd_adapt(&run, steps)?;
        }
        Cmd::Eval { run } => {
            cli::cmd_eval(&run)?;
        }
        Cmd::Plot { run } => {
            cli::cmd_plot(&run)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
