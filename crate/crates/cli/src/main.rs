use std::path::PathBuf;
use std::process::ExitCode;

use cead_core::experiments::{self, Experiment, ExperimentError, RunConfig};
use clap::{Parser, Subcommand};

/// Environment variable holding the default output directory.
const OUT_ENV: &str = "CEAD_OUT_DIR";

#[derive(Parser)]
#[command(name = "cead", version, about = "Simulate and verify the slow-fast trait-evolution model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config and $CEAD_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run replicates of the individual-based model.
    Simulate(Common),
    /// Simulate and compare the mean trait against the ODE solution.
    CeadCompare(Common),
    /// Frozen fast dynamics and its time-averaged second moment.
    FastEquilibrium(Common),
    /// Generator residual scaling and M₂ drift / variation estimates.
    GeneratorCheck(Common),
    /// Monte-Carlo check of the stopped duality identity.
    DualCheck(Common),
    /// Simulations over a list of K values.
    Sweep(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, common) = match cli.cmd {
        Cmd::Simulate(c) => (Experiment::Simulate, c),
        Cmd::CeadCompare(c) => (Experiment::CeadCompare, c),
        Cmd::FastEquilibrium(c) => (Experiment::FastEquilibrium, c),
        Cmd::GeneratorCheck(c) => (Experiment::GeneratorCheck, c),
        Cmd::DualCheck(c) => (Experiment::DualCheck, c),
        Cmd::Sweep(c) => (Experiment::Sweep, c),
    };
    match dispatch(exp, &common) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Config(_) | ExperimentError::Schema { .. } => 2,
        ExperimentError::Budget(_) => 3,
        ExperimentError::Io { .. } => 1,
    }
}

fn dispatch(exp: Experiment, c: &Common) -> Result<String, ExperimentError> {
    let cfg = RunConfig::load(&c.config, Some(exp))?;
    let seed = c.seed.unwrap_or(cfg.seed);
    let out = c
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok(match exp {
        Experiment::Simulate => {
            let k = cfg.scaling.as_ref().expect("validated").k;
            let s = experiments::run_simulations(&cfg, k, seed, &out)?;
            format!(
                "{} replicate(s), mean z(T) = {:.6} ± {:.6}, {} events -> {}",
                s.replicates.len(),
                s.mean_z_end,
                s.se_z_end,
                s.total_events,
                out.display()
            )
        }
        Experiment::CeadCompare => {
            let s = experiments::run_cead_compare(&cfg, seed, &out)?;
            format!(
                "mean sup|z - ode| = {:.6} ± {:.6} over {} replicate(s) -> {}",
                s.mean_sup_cead_error.unwrap_or(f64::NAN),
                s.se_sup_cead_error.unwrap_or(f64::NAN),
                s.replicates.len(),
                out.display()
            )
        }
        Experiment::FastEquilibrium => {
            let s = experiments::run_fast_equilibrium(&cfg, seed, &out)?;
            format!(
                "lambda = {:.6}, time-averaged M2 = {:.6} (1/lambda = {:.6}) -> {}",
                s.lambda,
                s.time_avg_m2,
                s.inverse_lambda,
                out.display()
            )
        }
        Experiment::GeneratorCheck => {
            let s = experiments::run_generator_check(&cfg, seed, &out)?;
            let slopes: Vec<String> = s
                .slow
                .iter()
                .chain(&s.fast)
                .map(|r| format!("{:?}@{}: {:.3}", r.kind, r.sigma_exponent, r.slope))
                .collect();
            format!("residual slopes {} -> {}", slopes.join(", "), out.display())
        }
        Experiment::DualCheck => {
            let r = experiments::run_dual_check(&cfg, seed, &out)?;
            format!(
                "lhs = {:.6} ± {:.6}, rhs = {:.6} ± {:.6}, z = {:.2} -> {}",
                r.lhs,
                r.lhs_se,
                r.rhs,
                r.rhs_se,
                r.z_score,
                out.display()
            )
        }
        Experiment::Sweep => {
            let s = experiments::run_sweep(&cfg, seed, &out)?;
            format!("{} K value(s) -> {}", s.ks.len(), out.display())
        }
    })
}
