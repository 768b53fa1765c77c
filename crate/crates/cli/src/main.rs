//! `sparse-lqr` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration, 3 convergence, 4 divergence, 5 I/O.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparse_lqr::harness::{
    estimation_experiment, estimation_summary, profile_experiment, resolve, resolved_summary, run_and_emit,
    write_estimation_tables, write_summary, ExperimentConfig, OutputPaths, RegretReport,
};
use sparse_lqr::ofu::{Mode, RunStatus};
use sparse_lqr::{Error, Result};

#[derive(Parser)]
#[command(name = "sparse-lqr", version, about = "Sparse adaptive LQ control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single seeded run of the episodic controller.
    Simulate(RunArgs),
    /// Monte Carlo regret sweep.
    Regret(RunArgs),
    /// Fixed-gain estimation experiment.
    Estimate(EstimateArgs),
    /// Identifiability certificate of the initial gain.
    Certify(RunArgs),
    /// Assumption profile over the ε-neighborhood of the system.
    Profile(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment description.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<u64>,
    /// adaptive, oracle or fixed-gain.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Sample size; the closed-form value when omitted.
    #[arg(long)]
    n: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.run.trials = t;
        }
        if let Some(h) = self.horizon {
            cfg.run.horizon = h;
        }
        if let Some(m) = self.mode {
            cfg.run.mode = m;
        }
        if let Some(d) = &self.out_dir {
            cfg.run.out_dir = d.clone();
        }
        Ok(cfg)
    }
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<OutputPaths> {
    let dir = &cfg.run.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(OutputPaths::in_dir(dir))
}

/// Outputs are already written; a diverged trial still makes the command fail.
fn fail_on_divergence(report: &RegretReport) -> Result<()> {
    for t in &report.trials {
        if let RunStatus::Diverged { step } = t.status {
            let norm = t.events.max_state_norm;
            eprintln!("trial {} diverged at step {step}", t.trial);
            return Err(Error::Divergence { step, norm });
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let mut cfg = args.load()?;
            if args.trials.is_none() {
                cfg.run.trials = 1;
            }
            let resolved = resolve(&cfg)?;
            let report = run_and_emit(&resolved, &cfg.run.out_dir)?;
            for t in &report.trials {
                println!("trial {} regret {:.6}", t.trial, t.regret.last().copied().unwrap_or(0.0));
            }
            fail_on_divergence(&report)?;
        }
        Command::Regret(args) => {
            let cfg = args.load()?;
            let resolved = resolve(&cfg)?;
            let report = run_and_emit(&resolved, &cfg.run.out_dir)?;
            if let Some(s) = report.horizon_stat(cfg.run.horizon) {
                println!(
                    "T = {}: mean regret {:.6} ± {:.6} over {} trials",
                    s.horizon, s.mean_regret, s.stderr_regret, s.trials
                );
            }
            println!("E1 {:.3}  E2 {:.3}", report.e1_frequency(), report.e2_frequency());
            fail_on_divergence(&report)?;
        }
        Command::Estimate(args) => {
            let cfg = args.run.load()?;
            let resolved = resolve(&cfg)?;
            let paths = prepare_dir(&cfg)?;
            let report = estimation_experiment(&resolved, args.n)?;
            write_estimation_tables(&report, &paths)?;
            write_summary(&paths.summary, estimation_summary(&resolved, &report))?;
            println!(
                "n = {}, lambda = {:.6e}: {}/{} trials within eps",
                report.n, report.lambda, report.successes, report.trials
            );
        }
        Command::Certify(args) => {
            let mut cfg = args.load()?;
            cfg.run.allow_uncertified = true;
            let resolved = resolve(&cfg)?;
            let paths = prepare_dir(&cfg)?;
            write_summary(&paths.summary, resolved_summary(&resolved))?;
            let c = &resolved.certificate;
            println!(
                "rho {:.6}  c_min {:.6}  alpha {:.6}  k {}  valid {}",
                c.rho,
                c.c_min,
                c.alpha,
                c.k,
                c.is_valid()
            );
        }
        Command::Profile(args) => {
            let mut cfg = args.load()?;
            cfg.run.allow_uncertified = true;
            let resolved = resolve(&cfg)?;
            let paths = prepare_dir(&cfg)?;
            let profile = profile_experiment(&resolved)?;
            let mut body = resolved_summary(&resolved);
            if let serde_json::Value::Object(map) = &mut body {
                map.insert(
                    "profile".into(),
                    serde_json::to_value(&profile).unwrap_or(serde_json::Value::Null),
                );
            }
            write_summary(&paths.summary, body)?;
            println!(
                "sigma_l {:.6}  sigma_k {:.6}  ell {:.6}  uncertified {}/{}",
                profile.sigma_l, profile.sigma_k, profile.ell_theta_eps, profile.uncertified.len(), profile.samples
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
