//! Ensemble Kalman inversion over the two policy parameters.
//!
//! The solver treats the rollout cost as a virtual measurement and drives it
//! toward zero: draw an ensemble from the prior, push every sample through
//! the forward map, then apply a tempered Kalman update
//!
//! `theta_i += C_ty (C_yy + R/alpha)^-1 (0 - (y_i + v_i))`
//!
//! where `C_ty`, `C_yy` are sample covariances of the noise-free predicted
//! measurements and `v_i ~ N(0, R)` perturbs each sample's innovation. The
//! perturbations are drawn from per-(iteration, sample) counter-based
//! streams, so results are bitwise reproducible for a given seed no matter
//! how many threads evaluate the forward map.
//!
//! The tempering factor `alpha` in (0, 1] inflates the measurement variance
//! to cap how far the ensemble mean moves per iteration; it is picked by
//! bisection against `step_cap` or taken from a fixed geometric schedule.
//! Iteration stops when the ensemble mean moves less than `tolerance`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{self, BarrierConfig, Limits};
use crate::pack::{PackState, Plant};
use crate::policy::{self, PolicyHyper, PolicyTheta};

/// Diagonal jitter added to the measurement covariance before factorization.
const COV_REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Largest tempering factor whose mean update stays within `step_cap`.
    Bisection,
    /// `alpha_l = min(1, 0.1 * 2^l)`.
    FixedSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnkiConfig {
    pub ensemble_size: usize,
    /// Stop once the ensemble mean moves less than this (2-norm).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Virtual measurement noise variance R.
    pub noise_variance: f64,
    pub prior_mean: [f64; 2],
    pub prior_cov: [[f64; 2]; 2],
    pub alpha_mode: AlphaMode,
    /// Cap on the ensemble-mean step used by [`AlphaMode::Bisection`].
    pub step_cap: f64,
    pub seed: u64,
    /// Project every sample onto the feasible triangle. Disabled only by
    /// synthetic diagnostics that need the unconstrained update.
    pub project_samples: bool,
}

impl Default for EnkiConfig {
    fn default() -> Self {
        EnkiConfig {
            ensemble_size: 50,
            tolerance: 1e-4,
            max_iterations: 30,
            noise_variance: 1e-2,
            prior_mean: [1.0 / 3.0, 1.0 / 3.0],
            prior_cov: [[0.25, 0.0], [0.0, 0.25]],
            alpha_mode: AlphaMode::Bisection,
            step_cap: 0.2,
            seed: 0,
            project_samples: true,
        }
    }
}

impl EnkiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 || self.ensemble_size > 1 << 20 {
            return Err(Error::Config(format!(
                "ensemble size {} outside [2, 2^20]",
                self.ensemble_size
            )));
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !self.noise_variance.is_finite() || self.noise_variance < 0.0 {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        if !self.step_cap.is_finite() || self.step_cap <= 0.0 {
            return Err(Error::Config("step cap must be positive".into()));
        }
        if self.prior_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("prior mean contains non-finite values".into()));
        }
        prior_sqrt(&self.prior_cov)?;
        Ok(())
    }
}

/// Lower factor L with `L L^T = cov` via the 2x2 eigendecomposition, so
/// positive semidefinite (including rank-deficient and zero) covariances
/// sample correctly. Errors when the matrix is asymmetric or indefinite.
fn prior_sqrt(cov: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let [[a, b], [c, d]] = *cov;
    if [a, b, c, d].iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("prior covariance contains non-finite values".into()));
    }
    let scale = a.abs().max(d.abs()).max(1.0);
    if (b - c).abs() > 1e-9 * scale {
        return Err(Error::Config("prior covariance must be symmetric".into()));
    }
    let off = (b + c) / 2.0;
    // symmetric 2x2 eigendecomposition in closed form
    let tr = a + d;
    let det_gap = ((a - d) / 2.0).hypot(off);
    let l1 = tr / 2.0 + det_gap;
    let l2 = tr / 2.0 - det_gap;
    if l2 < -1e-9 * scale {
        return Err(Error::Config("prior covariance must be positive semidefinite".into()));
    }
    let (l1, l2) = (l1.max(0.0), l2.max(0.0));
    // eigenvector for l1
    let (vx, vy) = if off.abs() > 1e-300 {
        let norm = (l1 - d).hypot(off);
        ((l1 - d) / norm, off / norm)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    // L = [v1 v2] diag(s1, s2), with v2 orthogonal to v1
    Ok([[vx * s1, -vy * s2], [vy * s1, vx * s2]])
}

/// Draw `ensemble_size` raw parameter samples from the Gaussian prior.
/// No projection; see [`init_ensemble`].
pub fn sample_prior(cfg: &EnkiConfig, rng: &mut impl Rng) -> Result<Vec<[f64; 2]>> {
    let l = prior_sqrt(&cfg.prior_cov)?;
    let mut out = Vec::with_capacity(cfg.ensemble_size);
    for _ in 0..cfg.ensemble_size {
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        out.push([
            cfg.prior_mean[0] + l[0][0] * z0 + l[0][1] * z1,
            cfg.prior_mean[1] + l[1][0] * z0 + l[1][1] * z1,
        ]);
    }
    Ok(out)
}

/// Parameter samples and their latest noise-free predicted measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub thetas: Vec<[f64; 2]>,
    pub measurements: Vec<Vec<f64>>,
    pub iteration: usize,
}

/// Draw the initial ensemble from the prior (stream 0 of the seed) and, if
/// configured, project every sample onto the feasible triangle.
pub fn init_ensemble(cfg: &EnkiConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0, 0);
    let mut thetas = sample_prior(cfg, &mut rng)?;
    if cfg.project_samples {
        for t in &mut thetas {
            *t = policy::project_theta(*t).as_array();
        }
    }
    Ok(Ensemble {
        thetas,
        measurements: Vec::new(),
        iteration: 0,
    })
}

/// Unbiased (1/(N-1)) sample moments of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub theta_mean: [f64; 2],
    pub y_mean: DVector<f64>,
    pub cov_theta: [[f64; 2]; 2],
    pub cov_y: DMatrix<f64>,
    /// 2 x d cross covariance between parameters and measurements.
    pub cross_cov: DMatrix<f64>,
}

pub fn ensemble_stats(ens: &Ensemble) -> Result<EnsembleStats> {
    let n = ens.thetas.len();
    if n < 2 {
        return Err(Error::Degenerate("ensemble statistics need at least two samples".into()));
    }
    if ens.measurements.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: ens.measurements.len(),
        });
    }
    let d = ens.measurements[0].len();
    if d == 0 || ens.measurements.iter().any(|m| m.len() != d) {
        return Err(Error::Degenerate("measurement vectors must share a positive length".into()));
    }
    for (i, m) in ens.measurements.iter().enumerate() {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("measurement of ensemble sample {i}")));
        }
    }

    let nf = n as f64;
    let theta_mean = mean_of(&ens.thetas);
    let mut y_mean = DVector::zeros(d);
    for m in &ens.measurements {
        for k in 0..d {
            y_mean[k] += m[k];
        }
    }
    y_mean /= nf;

    let denom = nf - 1.0;
    let mut cov_theta = [[0.0f64; 2]; 2];
    let mut cov_y = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(2, d);
    for (t, m) in ens.thetas.iter().zip(&ens.measurements) {
        let dt = [t[0] - theta_mean[0], t[1] - theta_mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                cov_theta[a][b] += dt[a] * dt[b] / denom;
            }
        }
        for k in 0..d {
            let dy_k = m[k] - y_mean[k];
            cross[(0, k)] += dt[0] * dy_k / denom;
            cross[(1, k)] += dt[1] * dy_k / denom;
            for l in k..d {
                cov_y[(k, l)] += dy_k * (m[l] - y_mean[l]) / denom;
            }
        }
    }
    for k in 0..d {
        for l in 0..k {
            cov_y[(k, l)] = cov_y[(l, k)];
        }
    }

    Ok(EnsembleStats {
        theta_mean,
        y_mean,
        cov_theta,
        cov_y,
        cross_cov: cross,
    })
}

pub(crate) fn mean_of(thetas: &[[f64; 2]]) -> [f64; 2] {
    let nf = thetas.len() as f64;
    let mut m = [0.0, 0.0];
    for t in thetas {
        m[0] += t[0];
        m[1] += t[1];
    }
    [m[0] / nf, m[1] / nf]
}

/// Norm of the mean update the Kalman step would take at tempering `alpha`.
fn mean_step_norm(stats: &EnsembleStats, noise_variance: f64, alpha: f64) -> f64 {
    let d = stats.y_mean.len();
    let mut s = stats.cov_y.clone();
    for k in 0..d {
        s[(k, k)] += noise_variance / alpha + COV_REGULARIZATION;
    }
    match Cholesky::new(s) {
        Some(chol) => {
            let x = chol.solve(&stats.y_mean);
            let d0 = stats.cross_cov.row(0).transpose().dot(&x);
            let d1 = stats.cross_cov.row(1).transpose().dot(&x);
            d0.hypot(d1)
        }
        None => f64::INFINITY,
    }
}

/// Pick the tempering factor for the current iteration.
///
/// Bisection returns the largest `alpha` in (0, 1] whose mean step stays
/// within `step_cap`, refined until the bracket is narrower than 1e-6.
pub fn select_alpha(stats: &EnsembleStats, cfg: &EnkiConfig, iteration: usize) -> f64 {
    match cfg.alpha_mode {
        AlphaMode::FixedSchedule => (0.1 * 2f64.powi(iteration as i32)).min(1.0),
        AlphaMode::Bisection => {
            if mean_step_norm(stats, cfg.noise_variance, 1.0) <= cfg.step_cap {
                return 1.0;
            }
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..25 {
                if hi - lo < 1e-6 {
                    break;
                }
                let mid = (lo + hi) / 2.0;
                if mean_step_norm(stats, cfg.noise_variance, mid) <= cfg.step_cap {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo.max(1e-6)
        }
    }
}

/// Counter-based stream: reproducible and order-independent, so parallel
/// evaluation cannot change results.
fn stream_rng(seed: u64, iteration: u64, sample: u64) -> ChaCha8Rng {
    let mut z = seed
        ^ iteration.wrapping_mul(0x9E3779B97F4A7C15)
        ^ sample.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Apply the tempered Kalman update in place.
///
/// Each sample's innovation is `0 - (y_i + v_i)` with `v_i ~ N(0, R)` drawn
/// from the sample's own stream for this iteration, fresh per component.
pub fn kalman_update(ens: &mut Ensemble, stats: &EnsembleStats, alpha: f64, cfg: &EnkiConfig) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("tempering factor {alpha} outside (0, 1]")));
    }
    let d = stats.y_mean.len();
    let mut s = stats.cov_y.clone();
    for k in 0..d {
        s[(k, k)] += cfg.noise_variance / alpha + COV_REGULARIZATION;
    }
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::Degenerate("measurement covariance is not positive definite".into()))?;
    // gain^T = S^-1 C_ty^T, d x 2
    let gain_t = chol.solve(&stats.cross_cov.transpose());

    let noise_sd = cfg.noise_variance.sqrt();
    let normal = Normal::new(0.0, noise_sd)
        .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
    let iteration = ens.iteration as u64;
    for (i, (theta, y)) in ens.thetas.iter_mut().zip(&ens.measurements).enumerate() {
        let mut rng = stream_rng(cfg.seed, iteration + 1, i as u64 + 1);
        let mut delta = [0.0f64, 0.0f64];
        for k in 0..d {
            let innovation = -(y[k] + normal.sample(&mut rng));
            delta[0] += gain_t[(k, 0)] * innovation;
            delta[1] += gain_t[(k, 1)] * innovation;
        }
        theta[0] += delta[0];
        theta[1] += delta[1];
        if !theta[0].is_finite() || !theta[1].is_finite() {
            return Err(Error::NonFinite(format!("parameter sample {i} after update")));
        }
        if cfg.project_samples {
            *theta = policy::project_theta(*theta).as_array();
        }
    }
    Ok(())
}

/// Per-iteration diagnostics captured by [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub alpha: f64,
    /// Mean over samples of the mean squared measurement value.
    pub misfit: f64,
    pub theta_mean: [f64; 2],
    /// Distance the ensemble mean moved in this iteration.
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnkiResult {
    /// Feasible solution: the projected final ensemble mean.
    pub theta_star: PolicyTheta,
    /// Raw final ensemble mean, useful for unconstrained diagnostics.
    pub theta_mean: [f64; 2],
    pub iterations: usize,
    pub final_step_norm: f64,
    pub converged: bool,
    pub posterior_cov: [[f64; 2]; 2],
    pub trace: Vec<IterationTrace>,
}

/// Run the inversion against an arbitrary forward map producing noise-free
/// predicted measurement vectors. Deterministic for a given config.
pub fn solve<F>(forward: F, cfg: &EnkiConfig) -> Result<EnkiResult>
where
    F: Fn(&[f64; 2]) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let mut ens = init_ensemble(cfg)?;
    let mut prev_mean = mean_of(&ens.thetas);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut final_step = f64::INFINITY;

    while ens.iteration < cfg.max_iterations {
        ens.measurements = ens
            .thetas
            .par_iter()
            .map(|t| forward(t))
            .collect::<Result<Vec<_>>>()?;
        let stats = ensemble_stats(&ens)?;
        let d = stats.y_mean.len() as f64;
        let misfit = ens
            .measurements
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>() / d)
            .sum::<f64>()
            / ens.measurements.len() as f64;
        let alpha = select_alpha(&stats, cfg, ens.iteration);
        kalman_update(&mut ens, &stats, alpha, cfg)?;
        let new_mean = mean_of(&ens.thetas);
        final_step = (new_mean[0] - prev_mean[0]).hypot(new_mean[1] - prev_mean[1]);
        trace.push(IterationTrace {
            iteration: ens.iteration,
            alpha,
            misfit,
            theta_mean: new_mean,
            step_norm: final_step,
        });
        ens.iteration += 1;
        prev_mean = new_mean;
        if final_step < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let nf = ens.thetas.len() as f64;
    let mut posterior_cov = [[0.0f64; 2]; 2];
    for t in &ens.thetas {
        let dt = [t[0] - prev_mean[0], t[1] - prev_mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                posterior_cov[a][b] += dt[a] * dt[b] / (nf - 1.0);
            }
        }
    }

    Ok(EnkiResult {
        theta_star: policy::project_theta(prev_mean),
        theta_mean: prev_mean,
        iterations: ens.iteration,
        final_step_norm: final_step,
        converged,
        posterior_cov,
        trace,
    })
}

/// Convenience wrapper: inversion of the pack rollout cost over the power
/// schedule `powers` starting from `state`.
pub fn solve_for_pack(
    plant: &Plant,
    state: &PackState,
    hyper: &PolicyHyper,
    powers: &[f64],
    limits: &Limits,
    barrier_cfg: &BarrierConfig,
    cfg: &EnkiConfig,
) -> Result<EnkiResult> {
    let zero_noise = vec![0.0; powers.len()];
    solve(
        |raw: &[f64; 2]| {
            let theta = PolicyTheta {
                soc_weight: raw[0],
                temp_weight: raw[1],
            };
            objective::rollout_measurements(
                plant, state, &theta, hyper, powers, limits, barrier_cfg, &zero_noise,
            )
        },
        cfg,
    )
}
