use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slowfast::config::{parse_epsilon_list, EpsilonSpec, ExperimentConfig};
use slowfast::experiments::{self, clt_csv, phi_check_csv, trace_csv, trace_svg};
use slowfast::{Error, Result};

/// Slow–fast stochastic neuron simulations and numerical checks.
#[derive(Debug, Parser)]
#[command(name = "slowfast", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file (built-in Morris–Lecar scenario if omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; falls back to PDMP_SEED, then to the config value.
    #[arg(long, global = true, env = "PDMP_SEED", value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    replicas: Option<usize>,
    /// Comma-separated ε values; `averaged` stands for ε = 0.
    #[arg(long, global = true, value_name = "LIST", value_parser = parse_epsilons)]
    epsilon: Option<EpsilonList>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trajectories for every ε and replica.
    Simulate,
    /// Paired ε-sweep against the averaged reference (sweep.csv).
    Sweep,
    /// Frozen-field fluctuation variance check (clt.csv).
    Clt,
    /// Trace of the fluctuation covariance along the averaged run.
    Trace,
    /// Cross-check of the Poisson solvers and closed forms.
    PhiCheck,
}

#[derive(Debug, Clone)]
struct EpsilonList(Vec<EpsilonSpec>);

fn parse_epsilons(s: &str) -> std::result::Result<EpsilonList, String> {
    parse_epsilon_list(s).map(EpsilonList)
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::parse(slowfast::config::MORRIS_LECAR_CFG)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(r) = common.replicas {
        cfg.replicas = r;
    }
    if let Some(EpsilonList(e)) = &common.epsilon {
        cfg.epsilons = e.clone();
        if let [EpsilonSpec::Value(v)] = e.as_slice() {
            cfg.clt.epsilon = *v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), body)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(&cli.common)?;
    let out = cfg.out.as_path();
    match cli.command {
        Command::Simulate => {
            let runs = experiments::run_simulate(&cfg)?;
            experiments::write_trajectories(&runs, out)?;
            for (name, tr) in &runs {
                println!("{name}: {} jumps, max |u|_H = {}", tr.njumps.last().copied().unwrap_or(0), tr.max_h_norm);
            }
        }
        Command::Sweep => {
            let rep = experiments::run_epsilon_sweep(&cfg)?;
            rep.write(out)?;
            print!("{}", rep.sweep_csv());
            if let Some(f) = rep.fit {
                println!("log-log slope {}", f.slope);
            }
        }
        Command::Clt => {
            let rows = experiments::run_clt_check(&cfg)?;
            write(out, "clt.csv", &clt_csv(&rows))?;
            let worst = rows
                .iter()
                .filter(|r| r.predicted_var > 0.0)
                .map(|r| (r.ratio - 1.0).abs())
                .fold(0.0f64, f64::max);
            println!("{} rows, max |ratio - 1| = {worst}", rows.len());
        }
        Command::Trace => {
            let rows = experiments::run_trace_series(&cfg)?;
            write(out, "trace.csv", &trace_csv(&rows))?;
            write(out, "trace.svg", &trace_svg(&rows))?;
            if let Some(r) = experiments::trace_bound_breach(&rows) {
                return Err(Error::Invariant(format!(
                    "trace {} exceeds the bound {} at t = {}",
                    r.trace,
                    r.paper_bound.unwrap_or(f64::NAN),
                    r.t
                )));
            }
        }
        Command::PhiCheck => {
            let rows = experiments::run_phi_check(&cfg)?;
            write(out, "phi_check.csv", &phi_check_csv(&rows))?;
            let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
            println!("{} instances, max relative discrepancy {worst:e}", rows.len());
            experiments::phi_check_verdict(&rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
