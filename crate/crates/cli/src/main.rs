//! `esnode`: train, preview, gradient-check and summarise runs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (including a failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use esnode_core::artifacts;
use esnode_core::config::RunConfig;
use esnode_core::gradcheck::{self, GradcheckOptions};
use esnode_core::pipeline;
use esnode_core::Error;

/// Environment variable that replaces the configured reservoir seed.
const SEED_ENV: &str = "ESNODE_SEED";

#[derive(Parser)]
#[command(name = "esnode", version, about = "Physics-informed echo state network ODE solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages and write every artifact.
    Run(ConfigArgs),
    /// Write the Euler trial solution only.
    Trial(ConfigArgs),
    /// Compare analytic and finite-difference Jacobians on a shrunken instance.
    Gradcheck {
        #[command(flatten)]
        args: ConfigArgs,
        /// Negate one Jacobian block first (negative control).
        #[arg(long, hide = true)]
        corrupt_sign: bool,
    },
    /// Print a table from the artifacts of an earlier run.
    Report {
        /// Output directory of the run.
        #[arg(long = "out", value_name = "DIR", default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory.
    #[arg(long = "out", value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Dotted override applied over the config file, e.g. stage1.max_iters=1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    if !args.config.is_file() {
        return Err(Failure::Usage(format!(
            "config file not found: {}",
            args.config.display()
        )));
    }
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
        overrides.push(format!("reservoir.seed={seed}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    Ok(RunConfig::load(&args.config, &overrides)?)
}

fn run(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let start = Instant::now();
    let (model, report) = pipeline::train(&cfg)?;
    artifacts::write_run(&args.out, &model, &report)?;
    println!(
        "{}: stage1 loss {:.3e}, stage2 loss {:.3e}, max-abs error {:.3e} vs {}, {:.1} s -> {}",
        cfg.problem,
        report.stage1.final_loss,
        report.stage2.final_loss,
        report.metrics.max_abs_overall,
        report.reference_kind.name(),
        start.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn trial(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let traj = pipeline::trial_solution(&cfg)?;
    let path = artifacts::write_trial(&args.out, &traj)?;
    println!("{}: {} trial points -> {}", cfg.problem, traj.len(), path.display());
    Ok(())
}

fn gradcheck(args: &ConfigArgs, corrupt_sign: bool) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let opts = GradcheckOptions {
        corrupt_sign,
        ..GradcheckOptions::default()
    };
    let r = gradcheck::run(&cfg, opts)?;
    println!(
        "{}: N={} steps={}",
        r.problem, r.n_neurons, r.n_steps
    );
    println!("stage1 jacobian max relative error {:.3e}", r.stage1_jacobian);
    println!("stage2 jacobian max relative error {:.3e}", r.stage2_jacobian);
    println!("stage1 e3 max abs deviation {:.3e}", r.stage1_e3);
    println!("stage2 e3 max abs deviation {:.3e}", r.stage2_e3);
    if r.passed() {
        println!("PASS (tolerance {:.0e})", gradcheck::JACOBIAN_TOL);
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "jacobian check failed (tolerance {:.0e})",
            gradcheck::JACOBIAN_TOL
        )))
    }
}

fn report(dir: &Path) -> Result<(), Failure> {
    let summary = artifacts::read_summary(dir)?;
    print!("{}", artifacts::render_table(&summary));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Trial(args) => trial(args),
        Command::Gradcheck { args, corrupt_sign } => gradcheck(args, *corrupt_sign),
        Command::Report { out } => report(out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
