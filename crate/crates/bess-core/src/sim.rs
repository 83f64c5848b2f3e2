//! Receding-horizon closed loop: at each control step, solve for the two
//! policy parameters over the lookahead window, apply the resulting power
//! split for one `dt`, advance the plant, and log. Also owns the CSV
//! schemas for step records and pack states.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::{BuiltScenario, ScenarioConfig};
use crate::enki::{self, EnkiConfig, EnkiResult};
use crate::error::{Error, Result};
use crate::objective;
use crate::pack::{self, PackState, Plant};
use crate::policy::{self, PolicyTheta};

/// One control step of the closed loop. `socs`, `temps` and the deviation
/// fields describe the state after applying `mus` for one `dt`; `loss` and
/// `residual` are evaluated at the pre-step state the split was chosen for.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub theta: PolicyTheta,
    /// Total instantaneous conversion loss in watts.
    pub loss: f64,
    pub max_soc_dev: f64,
    pub max_temp_dev: f64,
    /// Signed power-balance deviation `sum_j(mu_j - s*loss_j/|P|) - 1`
    /// (zero at zero demand).
    pub residual: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub socs: Vec<f64>,
    pub temps: Vec<f64>,
    pub mus: Vec<f64>,
    /// Diagnostic flags; not part of the CSV schema, false after a re-read.
    pub solver_converged: bool,
    pub infeasible: bool,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub cells: usize,
    pub dt: f64,
    /// Integral of the loss power over the run, in joules.
    pub total_loss_energy: f64,
    pub mean_loss: f64,
    pub max_soc_dev: f64,
    pub max_temp_dev: f64,
    pub final_max_soc_dev: f64,
    pub final_max_temp_dev: f64,
    pub infeasible_steps: usize,
    pub nonconverged_steps: usize,
    pub clamped_steps: usize,
    pub mean_iterations: f64,
    pub mean_solve_time: f64,
    pub total_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Solver seed for control step `k`, spread over the integers so
/// consecutive steps get unrelated noise streams.
pub fn step_seed(master: u64, k: usize) -> u64 {
    master.wrapping_add((k as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

/// Signed power-balance deviation of a split: how far the shares are from
/// covering the demand plus conversion losses, as a fraction of |P|.
fn balance_deviation(plant: &Plant, state: &PackState, mu: &[f64], p_out: f64) -> f64 {
    if p_out == 0.0 {
        return 0.0;
    }
    let sign = p_out.signum();
    let mut acc = 0.0;
    for (j, params) in plant.params.iter().enumerate() {
        let ocv = plant.curve.eval(state.socs()[j]);
        acc += mu[j] - sign * pack::power_loss(params, mu[j], p_out, ocv) / p_out.abs();
    }
    acc - 1.0
}

/// Raise the eigenvalues of a symmetric 2x2 matrix to at least `floor`.
/// Keeps the warm-start prior from collapsing once the solver converges.
fn floor_covariance(cov: [[f64; 2]; 2], floor: f64) -> [[f64; 2]; 2] {
    let a = cov[0][0];
    let d = cov[1][1];
    let off = (cov[0][1] + cov[1][0]) / 2.0;
    let gap = ((a - d) / 2.0).hypot(off);
    let l1 = ((a + d) / 2.0 + gap).max(floor);
    let l2 = ((a + d) / 2.0 - gap).max(floor);
    let (vx, vy) = if off.abs() > 1e-300 {
        let l_raw = (a + d) / 2.0 + gap;
        let norm = (l_raw - d).hypot(off);
        ((l_raw - d) / norm, off / norm)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    // l1 v v^T + l2 w w^T with w orthogonal to v
    [
        [l1 * vx * vx + l2 * vy * vy, (l1 - l2) * vx * vy],
        [(l1 - l2) * vx * vy, l1 * vy * vy + l2 * vx * vx],
    ]
}

pub fn run_scenario(cfg: &ScenarioConfig, base_dir: &Path) -> Result<SimResult> {
    let built = cfg.build(base_dir)?;
    run_built(cfg, &built)
}

pub fn run_built(cfg: &ScenarioConfig, scenario: &BuiltScenario) -> Result<SimResult> {
    run_built_observed(cfg, scenario, |_, _| {})
}

/// Closed loop with a per-step observer (progress reporting, solver
/// diagnostics). The observer sees each record and the solve it came from.
pub fn run_built_observed(
    cfg: &ScenarioConfig,
    scenario: &BuiltScenario,
    mut observer: impl FnMut(&StepRecord, &EnkiResult),
) -> Result<SimResult> {
    cfg.validate()?;
    let plant = &scenario.plant;
    let n = plant.len();
    if scenario.initial_state.len() != n {
        return Err(Error::Dimension { expected: n, got: scenario.initial_state.len() });
    }
    let resistances: Vec<f64> = plant.r_internal().collect();
    let steps = cfg.steps();

    let mut state = scenario.initial_state.clone();
    let mut prior_mean = cfg.solver.prior_mean;
    let mut prior_cov = cfg.solver.prior_cov;
    let mut prev_theta: Option<PolicyTheta> = None;
    let mut records = Vec::with_capacity(steps);
    let run_start = Instant::now();

    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let powers = scenario.profile.samples(t, cfg.dt, cfg.horizon + 1)?;
        let solver_cfg = EnkiConfig {
            seed: step_seed(cfg.seed, k),
            prior_mean,
            prior_cov,
            ..cfg.solver
        };
        let solve_start = Instant::now();
        let result = enki::solve_for_pack(
            plant, &state, &cfg.hyper, &powers, &cfg.limits, &cfg.barrier, &solver_cfg,
        )?;
        let solve_time = solve_start.elapsed().as_secs_f64();

        // a non-converged solve keeps the previous answer alive
        let theta = if result.converged {
            result.theta_star
        } else {
            prev_theta.unwrap_or(result.theta_star)
        };
        if result.converged && cfg.warm_start.enabled {
            prior_mean = theta.as_array();
            prior_cov = floor_covariance(result.posterior_cov, cfg.warm_start.cov_floor);
        }

        let p = powers[0];
        let mu = policy::policy_eval(&theta, &cfg.hyper, state.socs(), state.temps(), &resistances, p)?;
        let residuals = objective::constraint_residuals(plant, &state, &mu, p, &cfg.limits)?;
        let infeasible = residuals.iter().any(|r| *r > 0.0);
        let loss = objective::stage_loss(plant, &state, &mu, p)?;
        let residual = balance_deviation(plant, &state, &mu, p);
        let (next, clamped) = pack::pack_step(plant, &state, &mu, p)?;
        state = next;

        let record = StepRecord {
            t,
            theta,
            loss,
            max_soc_dev: state.max_soc_deviation(),
            max_temp_dev: state.max_temp_deviation(),
            residual,
            iterations: result.iterations,
            solve_time,
            socs: state.socs().to_vec(),
            temps: state.temps().to_vec(),
            mus: mu,
            solver_converged: result.converged,
            infeasible,
            clamped,
        };
        observer(&record, &result);
        prev_theta = Some(theta);
        records.push(record);
    }

    let summary = summarize(cfg, n, &records, run_start.elapsed().as_secs_f64());
    Ok(SimResult { records, summary })
}

fn summarize(cfg: &ScenarioConfig, cells: usize, records: &[StepRecord], total_time: f64) -> RunSummary {
    let steps = records.len();
    let sf = steps.max(1) as f64;
    RunSummary {
        steps,
        cells,
        dt: cfg.dt,
        total_loss_energy: records.iter().map(|r| r.loss * cfg.dt).sum(),
        mean_loss: records.iter().map(|r| r.loss).sum::<f64>() / sf,
        max_soc_dev: records.iter().map(|r| r.max_soc_dev).fold(0.0, f64::max),
        max_temp_dev: records.iter().map(|r| r.max_temp_dev).fold(0.0, f64::max),
        final_max_soc_dev: records.last().map_or(0.0, |r| r.max_soc_dev),
        final_max_temp_dev: records.last().map_or(0.0, |r| r.max_temp_dev),
        infeasible_steps: records.iter().filter(|r| r.infeasible).count(),
        nonconverged_steps: records.iter().filter(|r| !r.solver_converged).count(),
        clamped_steps: records.iter().filter(|r| r.clamped).count(),
        mean_iterations: records.iter().map(|r| r.iterations as f64).sum::<f64>() / sf,
        mean_solve_time: records.iter().map(|r| r.solve_time).sum::<f64>() / sf,
        total_time,
    }
}

const FIXED_COLUMNS: [&str; 9] = [
    "t", "theta1", "theta2", "loss", "max_soc_dev", "max_temp_dev", "residual", "iterations",
    "solve_time",
];

/// Write step records as CSV: the nine fixed columns above, then
/// `soc_1..soc_n`, `temp_1..temp_n`, `mu_1..mu_n`. `cells` fixes the header
/// width so an empty run still writes a well-formed header.
pub fn write_records_csv<W: Write>(writer: W, records: &[StepRecord], cells: usize) -> Result<()> {
    if cells == 0 {
        return Err(Error::Config("record schema needs at least one cell".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for prefix in ["soc", "temp", "mu"] {
        for j in 1..=cells {
            header.push(format!("{prefix}_{j}"));
        }
    }
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;

    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for (k, r) in records.iter().enumerate() {
        if r.socs.len() != cells || r.temps.len() != cells || r.mus.len() != cells {
            return Err(Error::Dimension { expected: cells, got: r.socs.len() });
        }
        row.clear();
        row.push(r.t.to_string());
        row.push(r.theta.soc_weight.to_string());
        row.push(r.theta.temp_weight.to_string());
        row.push(r.loss.to_string());
        row.push(r.max_soc_dev.to_string());
        row.push(r.max_temp_dev.to_string());
        row.push(r.residual.to_string());
        row.push(r.iterations.to_string());
        row.push(r.solve_time.to_string());
        for v in r.socs.iter().chain(&r.temps).chain(&r.mus) {
            row.push(v.to_string());
        }
        w.write_record(&row)
            .map_err(|e| Error::Csv(format!("step {k}: {e}")))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

pub fn write_records_csv_path(path: impl AsRef<Path>, records: &[StepRecord], cells: usize) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_csv(file, records, cells)
}

fn parse_field<T: std::str::FromStr>(row: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Csv(format!("row {row}: bad {name} value {raw:?}")))
}

fn parse_finite(row: usize, name: &str, raw: &str) -> Result<f64> {
    let v: f64 = parse_field(row, name, raw)?;
    if !v.is_finite() {
        return Err(Error::Csv(format!("row {row}: non-finite {name} value {raw:?}")));
    }
    Ok(v)
}

/// Read records back from the CSV schema written by [`write_records_csv`].
/// The diagnostic flags are not serialized and come back false.
pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if headers.len() < FIXED_COLUMNS.len() + 3 || (headers.len() - FIXED_COLUMNS.len()) % 3 != 0 {
        return Err(Error::Csv(format!(
            "header has {} columns, expected 9 + 3n",
            headers.len()
        )));
    }
    let cells = (headers.len() - FIXED_COLUMNS.len()) / 3;
    for (i, want) in FIXED_COLUMNS.iter().enumerate() {
        if &headers[i] != *want {
            return Err(Error::Csv(format!("column {i} is {:?}, expected {want:?}", &headers[i])));
        }
    }
    for (block, prefix) in ["soc", "temp", "mu"].iter().enumerate() {
        for j in 0..cells {
            let idx = FIXED_COLUMNS.len() + block * cells + j;
            let want = format!("{prefix}_{}", j + 1);
            if &headers[idx] != want.as_str() {
                return Err(Error::Csv(format!(
                    "column {idx} is {:?}, expected {want:?}",
                    &headers[idx]
                )));
            }
        }
    }

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(Error::Csv(format!(
                "row {row}: {} fields, expected {}",
                rec.len(),
                headers.len()
            )));
        }
        let base = FIXED_COLUMNS.len();
        let block = |b: usize| -> Result<Vec<f64>> {
            (0..cells)
                .map(|j| parse_finite(row, &headers[base + b * cells + j].to_string(), &rec[base + b * cells + j]))
                .collect()
        };
        records.push(StepRecord {
            t: parse_finite(row, "t", &rec[0])?,
            theta: PolicyTheta {
                soc_weight: parse_finite(row, "theta1", &rec[1])?,
                temp_weight: parse_finite(row, "theta2", &rec[2])?,
            },
            loss: parse_finite(row, "loss", &rec[3])?,
            max_soc_dev: parse_finite(row, "max_soc_dev", &rec[4])?,
            max_temp_dev: parse_finite(row, "max_temp_dev", &rec[5])?,
            residual: parse_finite(row, "residual", &rec[6])?,
            iterations: parse_field(row, "iterations", &rec[7])?,
            solve_time: parse_finite(row, "solve_time", &rec[8])?,
            socs: block(0)?,
            temps: block(1)?,
            mus: block(2)?,
            solver_converged: false,
            infeasible: false,
            clamped: false,
        });
    }
    Ok(records)
}

pub fn read_records_csv_path(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_csv(file)
}

/// Write a pack state as CSV with header `soc,temp`, one row per cell.
pub fn write_state_csv<W: Write>(writer: W, state: &PackState) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["soc", "temp"]).map_err(|e| Error::Csv(e.to_string()))?;
    for (q, t) in state.socs().iter().zip(state.temps()) {
        w.write_record([q.to_string(), t.to_string()])
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Read a pack state from the `soc,temp` CSV schema; all pack-state
/// invariants (ranges, finiteness) are enforced.
pub fn read_state_csv<R: Read>(reader: R) -> Result<PackState> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "soc" || &headers[1] != "temp" {
        return Err(Error::Csv(format!(
            "expected header \"soc,temp\", got \"{}\"",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut socs = Vec::new();
    let mut temps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::Csv(format!("row {row}: expected 2 fields, got {}", rec.len())));
        }
        socs.push(parse_finite(row, "soc", &rec[0])?);
        temps.push(parse_finite(row, "temp", &rec[1])?);
    }
    PackState::new(socs, temps)
}

pub fn read_state_csv_path(path: impl AsRef<Path>) -> Result<PackState> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_state_csv(file)
}
