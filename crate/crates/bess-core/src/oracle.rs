//! Brute-force references used to validate the optimizer.
//!
//! Nothing here is fast, and that is the point: both searches enumerate a
//! regular grid independently of the ensemble machinery so they can certify
//! its answers. `grid_search_cost` scans the feasible parameter triangle;
//! `brute_force_mu` scans power splits directly for packs of up to three
//! cells, which is enough to check the policy parameterization against the
//! unconstrained-in-mu optimum.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::{self, BarrierConfig, Limits};
use crate::pack::{PackState, Plant};
use crate::policy::{PolicyHyper, PolicyTheta};

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub theta: PolicyTheta,
    pub cost: f64,
    /// Effective spacing actually used (1/m for the rounded subdivision m).
    pub grid_step: f64,
}

fn subdivisions(grid_step: f64) -> Result<usize> {
    if !grid_step.is_finite() || grid_step <= 0.0 || grid_step > 1.0 {
        return Err(Error::Config(format!("grid step {grid_step} outside (0, 1]")));
    }
    Ok(((1.0 / grid_step).round() as usize).max(1))
}

/// Node (i, j) of the triangular grid with subdivision m. The min() guards
/// float drift so the sum never exceeds 1 and stays feasible.
fn grid_theta(i: usize, j: usize, m: usize) -> PolicyTheta {
    let h = 1.0 / m as f64;
    let soc_weight = (i as f64 * h).min(1.0);
    let temp_weight = (j as f64 * h).min(1.0 - soc_weight);
    PolicyTheta { soc_weight, temp_weight }
}

/// Exhaustive minimization of an arbitrary cost over the parameter triangle.
///
/// Ties break lexicographically on (cost, i, j), so the result is unique and
/// independent of evaluation order even when run in parallel.
pub fn grid_search_cost<F>(cost: F, grid_step: f64) -> Result<GridSearchResult>
where
    F: Fn(&PolicyTheta) -> Result<f64> + Sync,
{
    let m = subdivisions(grid_step)?;
    // one best candidate per row i, rows evaluated in parallel
    let rows: Vec<(f64, usize, PolicyTheta)> = (0..=m)
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(f64, usize, PolicyTheta)> = None;
            for j in 0..=(m - i) {
                let theta = grid_theta(i, j, m);
                let c = cost(&theta)?;
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "grid cost at ({}, {})",
                        theta.soc_weight, theta.temp_weight
                    )));
                }
                if best.as_ref().is_none_or(|(bc, _, _)| c < *bc) {
                    best = Some((c, j, theta));
                }
            }
            Ok(best.expect("row has at least one node"))
        })
        .collect::<Result<_>>()?;

    let (cost, _, theta) = rows
        .into_iter()
        .reduce(|best, cand| if cand.0 < best.0 { cand } else { best })
        .expect("grid has at least one row");
    Ok(GridSearchResult {
        theta,
        cost,
        grid_step: 1.0 / m as f64,
    })
}

/// Noise-free penalized rollout cost: the sum of the per-stage virtual
/// measurements (normalized loss plus barrier penalties), the scalar both
/// the solver and the grid reference are judged on.
pub fn rollout_cost(
    plant: &Plant,
    state: &PackState,
    theta: &PolicyTheta,
    hyper: &PolicyHyper,
    powers: &[f64],
    limits: &Limits,
    barrier_cfg: &BarrierConfig,
) -> Result<f64> {
    let noise = vec![0.0; powers.len()];
    let y = objective::rollout_measurements(plant, state, theta, hyper, powers, limits, barrier_cfg, &noise)?;
    Ok(y.iter().sum())
}

/// Grid search over the rollout cost; the reference answer for the solver.
pub fn grid_search_theta(
    plant: &Plant,
    state: &PackState,
    hyper: &PolicyHyper,
    powers: &[f64],
    limits: &Limits,
    barrier_cfg: &BarrierConfig,
    grid_step: f64,
) -> Result<GridSearchResult> {
    grid_search_cost(
        |theta| rollout_cost(plant, state, theta, hyper, powers, limits, barrier_cfg),
        grid_step,
    )
}

/// Grid certification of a solver answer on the shared rollout cost.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OracleReport {
    pub theta_best: PolicyTheta,
    pub cost_best: f64,
    pub theta_solver: PolicyTheta,
    pub cost_solver: f64,
    /// `(cost_solver - cost_best) / max(cost_best, 1e-12)`; can be negative
    /// when the true optimum falls between grid nodes.
    pub relative_gap: f64,
    pub resolution: usize,
}

/// Run the inversion and certify it against an exhaustive grid with
/// `resolution` nodes per axis.
pub fn compare_with_grid(
    plant: &Plant,
    state: &PackState,
    hyper: &PolicyHyper,
    powers: &[f64],
    limits: &Limits,
    barrier_cfg: &BarrierConfig,
    enki_cfg: &crate::enki::EnkiConfig,
    resolution: usize,
) -> Result<OracleReport> {
    if resolution < 2 {
        return Err(Error::Config(format!("grid resolution {resolution} must be at least 2")));
    }
    let grid_step = 1.0 / (resolution - 1) as f64;
    let grid = grid_search_theta(plant, state, hyper, powers, limits, barrier_cfg, grid_step)?;
    let solved = crate::enki::solve_for_pack(plant, state, hyper, powers, limits, barrier_cfg, enki_cfg)?;
    let cost_solver = rollout_cost(plant, state, &solved.theta_star, hyper, powers, limits, barrier_cfg)?;
    Ok(OracleReport {
        theta_best: grid.theta,
        cost_best: grid.cost,
        theta_solver: solved.theta_star,
        cost_solver,
        relative_gap: (cost_solver - grid.cost) / grid.cost.max(1e-12),
        resolution,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Remark1Report {
    pub policy_mu: Vec<f64>,
    pub oracle_mu: Vec<f64>,
    pub max_gap: f64,
    pub grid_step: f64,
    pub passed: bool,
}

/// Check that the policy at theta = (0, 0), pure inverse-resistance
/// weighting, reproduces the brute-force loss minimizer. Exact only when
/// every cell sits at the same open-circuit voltage and there is no
/// converter resistance; callers are expected to supply that regime.
pub fn verify_remark1(
    plant: &Plant,
    state: &PackState,
    p_out: f64,
    limits: &Limits,
    grid_step: f64,
) -> Result<Remark1Report> {
    let theta = PolicyTheta { soc_weight: 0.0, temp_weight: 0.0 };
    let resistances: Vec<f64> = plant.r_internal().collect();
    let policy_mu = crate::policy::policy_eval(
        &theta,
        &PolicyHyper::default(),
        state.socs(),
        state.temps(),
        &resistances,
        p_out,
    )?;
    match brute_force_mu(plant, state, p_out, limits, grid_step)? {
        MuSearchOutcome::Feasible { mu, .. } => {
            let max_gap = policy_mu
                .iter()
                .zip(&mu)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let cell = subdivisions(grid_step).map(|m| 1.0 / m as f64)?;
            Ok(Remark1Report {
                policy_mu,
                oracle_mu: mu,
                max_gap,
                grid_step: cell,
                passed: max_gap <= cell + 1e-12,
            })
        }
        MuSearchOutcome::Infeasible { violation, .. } => Err(Error::Degenerate(format!(
            "reference search found no feasible split (worst residual {violation:.3e})"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MuSearchOutcome {
    /// Best feasible split and its instantaneous power loss.
    Feasible { mu: Vec<f64>, loss: f64 },
    /// No grid point satisfied every constraint; carries the least-violating
    /// candidate and its worst residual.
    Infeasible { mu: Vec<f64>, violation: f64 },
}

/// Exhaustive search over power splits on the simplex for packs of up to
/// three cells: minimizes instantaneous loss subject to the hard constraint
/// residuals. Ties break lexicographically on grid indices.
pub fn brute_force_mu(
    plant: &Plant,
    state: &PackState,
    p_out: f64,
    limits: &Limits,
    grid_step: f64,
) -> Result<MuSearchOutcome> {
    let n = plant.len();
    if n > 3 {
        return Err(Error::Config(format!(
            "exhaustive split search supports at most 3 cells, got {n}"
        )));
    }
    if state.len() != n {
        return Err(Error::Dimension { expected: n, got: state.len() });
    }
    let m = subdivisions(grid_step)?;
    let h = 1.0 / m as f64;

    let candidates = |i: usize| -> Vec<Vec<f64>> {
        match n {
            1 => vec![vec![1.0]],
            2 => {
                let a = (i as f64 * h).min(1.0);
                vec![vec![a, 1.0 - a]]
            }
            _ => {
                let a = (i as f64 * h).min(1.0);
                (0..=(m - i))
                    .map(|j| {
                        let b = (j as f64 * h).min(1.0 - a);
                        vec![a, b, (1.0 - a - b).max(0.0)]
                    })
                    .collect()
            }
        }
    };
    let rows = if n <= 2 { if n == 1 { 0 } else { m } } else { m };

    #[derive(Clone)]
    struct RowBest {
        feasible: Option<(f64, usize, Vec<f64>)>,
        violation: (f64, usize, Vec<f64>),
    }

    let row_results: Vec<RowBest> = (0..=rows)
        .into_par_iter()
        .map(|i| {
            let mut feasible: Option<(f64, usize, Vec<f64>)> = None;
            let mut violation: Option<(f64, usize, Vec<f64>)> = None;
            for (j, mu) in candidates(i).into_iter().enumerate() {
                let residuals = objective::constraint_residuals(plant, state, &mu, p_out, limits)?;
                let worst = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if worst <= 0.0 {
                    let loss = objective::stage_loss(plant, state, &mu, p_out)?;
                    if feasible.as_ref().is_none_or(|(bl, _, _)| loss < *bl) {
                        feasible = Some((loss, j, mu.clone()));
                    }
                }
                if violation.as_ref().is_none_or(|(bv, _, _)| worst < *bv) {
                    violation = Some((worst, j, mu));
                }
            }
            let violation = violation.expect("row has at least one candidate");
            Ok(RowBest { feasible, violation })
        })
        .collect::<Result<_>>()?;

    let mut best_feasible: Option<(f64, Vec<f64>)> = None;
    let mut best_violation: Option<(f64, Vec<f64>)> = None;
    for row in row_results {
        if let Some((loss, _, mu)) = row.feasible {
            if best_feasible.as_ref().is_none_or(|(bl, _)| loss < *bl) {
                best_feasible = Some((loss, mu));
            }
        }
        let (v, _, mu) = row.violation;
        if best_violation.as_ref().is_none_or(|(bv, _)| v < *bv) {
            best_violation = Some((v, mu));
        }
    }

    Ok(match best_feasible {
        Some((loss, mu)) => MuSearchOutcome::Feasible { mu, loss },
        None => {
            let (violation, mu) = best_violation.expect("grid is nonempty");
            MuSearchOutcome::Infeasible { mu, violation }
        }
    })
}

/// Loss-minimizing split for cells at a common terminal voltage with no
/// converter resistance: weights proportional to 1/R. Written out directly
/// so it stays independent of the policy implementation it validates.
pub fn harmonic_resistance_split(resistances: &[f64]) -> Result<Vec<f64>> {
    if resistances.is_empty() {
        return Err(Error::Degenerate("no resistances".into()));
    }
    if resistances.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::Degenerate("resistances must be positive and finite".into()));
    }
    let inv: Vec<f64> = resistances.iter().map(|r| 1.0 / r).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}
