//! `jens`: sweep Jacobian-regularized ensembles over a config grid, craft
//! worst-case universal perturbations, report the accuracy-robustness
//! trade-off, and verify the analytic norm bounds.
//!
//! Exit codes: 0 success, 1 usage or invalid configuration, 2 missing or
//! malformed data/artifacts, 3 training divergence (sweep completed, some
//! grid points recorded as diverged), 4 theory verification failure.

mod config;
mod runner;

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use jens_core::Error;

use crate::config::ExperimentConfig;
use crate::runner::TheoryParams;

#[derive(Parser)]
#[command(
    name = "jens",
    version,
    about = "Workbench for Jacobian-regularized ensembles under universal adversarial perturbations"
)]
struct Cli {
    /// Worker threads for member training, attack restarts, and Monte Carlo
    /// chunks (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every (method, learners, lambda) grid point; reruns skip
    /// up-to-date points.
    Train(RunArgs),
    /// Craft the worst-case universal perturbation per trained model and
    /// budget.
    Attack(RunArgs),
    /// Score clean and robust accuracy and write report.csv, the top-k
    /// table, and the trade-off plot.
    Eval(RunArgs),
    /// Re-render the table and plot from an existing report.csv without
    /// touching models.
    Report(RunArgs),
    /// Check the weight floor property and the analytic norm bounds by
    /// exact arithmetic and Monte Carlo.
    VerifyTheory(TheoryArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (flat key = value with [section] headers);
    /// built-in defaults apply when omitted.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory root (default from the config, `runs`).
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; every stage derives its randomness from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override one config key, e.g. --set train.epochs=5. Repeatable;
    /// applied after the file and --paper-scale, before --out/--seed.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Restore the full-scale protocol: LeNet, 50 attack seeds, the
    /// complete learner/lambda/budget grids (MNIST when the dataset was
    /// left synthetic).
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// Ensemble size for the bounds simulation.
    #[arg(long, default_value_t = 5, value_name = "M")]
    members: usize,
    #[arg(long, default_value_t = 4, value_name = "C")]
    classes: usize,
    #[arg(long, default_value_t = 6, value_name = "D")]
    dim: usize,
    /// Mean of each Jacobian entry.
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    /// Standard deviation of each Jacobian entry.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 100_000, value_name = "N")]
    samples: usize,
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// Simplex draws per member count in the weight property sweep.
    #[arg(long, default_value_t = 10_000, value_name = "N")]
    trials: usize,
    /// Directory for the verification CSVs.
    #[arg(short, long, value_name = "DIR", default_value = "runs/theory")]
    out: PathBuf,
    /// Negative control: inflate the uniform-floor reference by 10% so the
    /// bounds check must fail.
    #[arg(long, hide = true)]
    tamper_lower: bool,
}

impl TheoryArgs {
    fn params(&self) -> TheoryParams {
        TheoryParams {
            members: self.members,
            classes: self.classes,
            dim: self.dim,
            mu: self.mu,
            sigma: self.sigma,
            samples: self.samples,
            seed: self.seed,
            trials: self.trials,
            out: self.out.clone(),
            tamper_lower: self.tamper_lower,
        }
    }
}

/// Precedence, lowest to highest: built-in defaults, config file,
/// --paper-scale, --set overrides, then the dedicated --out/--seed flags.
fn resolve(args: &RunArgs) -> jens_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => config::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    if args.paper_scale {
        cfg.apply_paper_scale();
    }
    for kv in &args.set {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: &Cmd) -> jens_core::Result<i32> {
    match cmd {
        Cmd::Train(args) => runner::cmd_train(&resolve(args)?),
        Cmd::Attack(args) => runner::cmd_attack(&resolve(args)?),
        Cmd::Eval(args) => runner::cmd_eval(&resolve(args)?),
        Cmd::Report(args) => runner::cmd_report(&resolve(args)?),
        Cmd::VerifyTheory(args) => runner::cmd_verify_theory(&args.params()),
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::NonFinite(_)
        | Error::UnsupportedAggregation(_) => 1,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Format { .. }
        | Error::Io(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success; real parse errors are
            // usage failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            process::exit(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            process::exit(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            process::exit(1);
        }
    }
    match run(&cli.cmd) {
        Ok(code) => process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(exit_code_for(&e));
        }
    }
}
