//! `bess`: closed-loop simulation, one-shot solves, oracle comparison, and
//! benchmarking for the pack power-sharing optimizer.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical
//! divergence at runtime, 3 I/O failure.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use bess_core::config::ScenarioConfig;
use bess_core::error::{Error, Result};
use bess_core::sim;
use bess_core::{bench, oracle};

#[derive(Parser)]
#[command(name = "bess", version, about = "Battery pack power-sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the receding-horizon closed loop and write records/summary files.
    Simulate {
        /// Scenario JSON; omitted means the built-in default scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for records.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-iteration solver diagnostics to enki_trace.csv.
        #[arg(long)]
        debug_enki: bool,
        /// Suppress progress output on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Solve a single control step for a pack state read from CSV and print
    /// the resulting parameters and split as JSON.
    SolveStep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pack state CSV with header soc,temp and one row per cell.
        #[arg(long)]
        state: PathBuf,
        /// Control time at which to solve.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
    /// Certify the solver against an exhaustive parameter grid; prints the
    /// comparison report as JSON.
    OracleCompare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid resolution (nodes per parameter axis).
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure per-step solve times over pack and ensemble sizes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
        ensembles: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        /// Also write the timing table to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        if let Error::Io { source, .. } = &e {
            eprintln!("  caused by: {source}");
        }
        std::process::exit(e.exit_code());
    }
}

/// Load the scenario and return it with the directory relative paths
/// resolve against (the config file's directory, or the working directory
/// for the built-in default).
fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<(ScenarioConfig, PathBuf)> {
    let (mut cfg, base) = match path {
        Some(p) => {
            let cfg = ScenarioConfig::from_json_path(p)?;
            let base = p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            (cfg, base)
        }
        None => (ScenarioConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed, debug_enki, quiet } => {
            simulate(&config, &out, seed, debug_enki, quiet)
        }
        Command::SolveStep { config, state, t } => solve_step(&config, &state, t),
        Command::OracleCompare { config, grid, t, seed } => oracle_compare(&config, grid, t, seed),
        Command::Bench { config, sizes, ensembles, steps, out } => {
            run_bench(&config, &sizes, &ensembles, steps, out.as_deref())
        }
    }
}

fn simulate(
    config: &Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    debug_enki: bool,
    quiet: bool,
) -> Result<()> {
    let (cfg, base) = load_config(config, seed)?;
    let scenario = cfg.build(&base)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut trace_writer = if debug_enki {
        let path = out.join("enki_trace.csv");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "step,iteration,alpha,misfit,theta1,theta2,step_norm")
            .map_err(|e| Error::io(&path, e))?;
        Some((f, path))
    } else {
        None
    };

    let total_steps = cfg.steps();
    let mut step = 0usize;
    let mut trace_err: Option<Error> = None;
    let result = sim::run_built_observed(&cfg, &scenario, |record, solve| {
        if let Some((f, path)) = &mut trace_writer {
            if trace_err.is_none() {
                for it in &solve.trace {
                    if let Err(e) = writeln!(
                        f,
                        "{},{},{},{},{},{},{}",
                        step, it.iteration, it.alpha, it.misfit, it.theta_mean[0], it.theta_mean[1], it.step_norm
                    ) {
                        trace_err = Some(Error::io(path.as_path(), e));
                        break;
                    }
                }
            }
        }
        step += 1;
        if !quiet && (step % 300 == 0 || step == total_steps) {
            eprintln!(
                "step {step}/{total_steps}  t={:.0}s  soc_dev={:.4}  temp_dev={:.3}",
                record.t, record.max_soc_dev, record.max_temp_dev
            );
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e);
    }

    let records_path = out.join("records.csv");
    sim::write_records_csv_path(&records_path, &result.records, scenario.plant.len())?;
    let summary_path = out.join("summary.json");
    let summary_json = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    fs::write(&summary_path, summary_json.as_bytes()).map_err(|e| Error::io(&summary_path, e))?;

    println!("{summary_json}");
    Ok(())
}

#[derive(serde::Serialize)]
struct SolveStepOutput {
    t: f64,
    theta: bess_core::policy::PolicyTheta,
    mu: Vec<f64>,
    converged: bool,
    iterations: usize,
    final_step_norm: f64,
}

fn solve_step(config: &Option<PathBuf>, state_path: &Path, t: f64) -> Result<()> {
    let (cfg, base) = load_config(config, None)?;
    let scenario = cfg.build(&base)?;
    let state = sim::read_state_csv_path(state_path)?;
    if state.len() != scenario.plant.len() {
        return Err(Error::Dimension { expected: scenario.plant.len(), got: state.len() });
    }

    let powers = scenario.profile.samples(t, cfg.dt, cfg.horizon + 1)?;
    let k = (t / cfg.dt).round() as usize;
    let solver_cfg = bess_core::enki::EnkiConfig {
        seed: sim::step_seed(cfg.seed, k),
        ..cfg.solver
    };
    let result = bess_core::enki::solve_for_pack(
        &scenario.plant, &state, &cfg.hyper, &powers, &cfg.limits, &cfg.barrier, &solver_cfg,
    )?;
    let resistances: Vec<f64> = scenario.plant.r_internal().collect();
    let mu = bess_core::policy::policy_eval(
        &result.theta_star, &cfg.hyper, state.socs(), state.temps(), &resistances, powers[0],
    )?;

    let output = SolveStepOutput {
        t,
        theta: result.theta_star,
        mu,
        converged: result.converged,
        iterations: result.iterations,
        final_step_norm: result.final_step_norm,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&output)
            .map_err(|e| Error::Config(format!("output serialization: {e}")))?
    );
    Ok(())
}

fn oracle_compare(config: &Option<PathBuf>, grid: usize, t: f64, seed: Option<u64>) -> Result<()> {
    let (cfg, base) = load_config(config, seed)?;
    let scenario = cfg.build(&base)?;
    let powers = scenario.profile.samples(t, cfg.dt, cfg.horizon + 1)?;
    let k = (t / cfg.dt).round() as usize;
    let solver_cfg = bess_core::enki::EnkiConfig {
        seed: sim::step_seed(cfg.seed, k),
        ..cfg.solver
    };
    let report = oracle::compare_with_grid(
        &scenario.plant,
        &scenario.initial_state,
        &cfg.hyper,
        &powers,
        &cfg.limits,
        &cfg.barrier,
        &solver_cfg,
        grid,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?
    );
    Ok(())
}

fn run_bench(
    config: &Option<PathBuf>,
    sizes: &[usize],
    ensembles: &[usize],
    steps: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (cfg, base) = load_config(config, None)?;
    let points = bench::bench_grid(&cfg, &base, sizes, ensembles, steps)?;
    let json = serde_json::to_string_pretty(&points)
        .map_err(|e| Error::Config(format!("bench serialization: {e}")))?;
    if let Some(path) = out {
        fs::write(path, json.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    println!("{json}");
    Ok(())
}
