use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coordcv::harness::{
    cmd_case_study, cmd_gradcheck, cmd_sweep, cmd_train, parse_cv_mode, resolve_config, Overrides,
};

/// Control-variate experiments for policy gradients: train PPO with scalar,
/// layer-wise, or coordinate-wise baselines, compare their gradient variance
/// on a frozen policy, sweep the fit-loss weights, or audit every analytic
/// gradient against finite differences.
#[derive(Parser)]
#[command(name = "coordcv", version, arg_required_else_help = true)]
struct Cli {
    /// key = value config file with [experiment], [ppo], [fit], [case_study], [sweep] sections
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// run a single seed instead of the configured list
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// output directory (default: out)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// worker threads for independent cells; 0 picks one per core
    #[arg(long, global = true, value_name = "K")]
    workers: Option<usize>,

    /// run a single environment instead of the configured list
    #[arg(long, global = true, value_name = "NAME")]
    env: Option<String>,

    /// run a single control variate: value, scalar, layer, or coord
    #[arg(long, global = true, value_name = "MODE")]
    cv: Option<String>,

    /// fit-loss blend weight toward plain value regression
    #[arg(long, global = true, value_name = "X")]
    lambda: Option<f64>,

    /// fit-loss shrinkage weight toward the head mean
    #[arg(long, global = true, value_name = "Y")]
    rho: Option<f64>,

    /// fit the baseline on a fresh rollout instead of the policy-update sample
    #[arg(long, global = true)]
    independent_sample: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the (env, cv, seed) grid and write curves, summary, and plots
    Train,
    /// Compare estimator variance and MSE on a frozen policy
    CaseStudy,
    /// Train across the (lambda, rho) fit-loss grid
    Sweep,
    /// Check every analytic gradient against finite differences
    Gradcheck,
}

fn run(cli: Cli) -> coordcv::Result<ExitCode> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        workers: cli.workers,
        env: cli.env,
        cv: cli.cv.as_deref().map(parse_cv_mode).transpose()?,
        lambda: cli.lambda,
        rho: cli.rho,
        independent_sample: cli.independent_sample,
    };
    let cfg = resolve_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train => {
            cmd_train(&cfg)?;
        }
        Command::CaseStudy => {
            cmd_case_study(&cfg)?;
        }
        Command::Sweep => {
            cmd_sweep(&cfg)?;
        }
        Command::Gradcheck => {
            let report = cmd_gradcheck(cfg.seeds[0]);
            if !report.all_pass() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
