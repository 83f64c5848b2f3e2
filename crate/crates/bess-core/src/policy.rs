//! Two-parameter power sharing policy.
//!
//! The share of pack power routed to cell j is a convex combination of three
//! normalized weight vectors: a SoC-balancing term, a temperature-balancing
//! term and an efficiency term that prefers low-resistance cells:
//!
//! `mu_j = t_soc * w_soc_j + t_temp * w_temp_j + (1 - t_soc - t_temp) * w_res_j`
//!
//! Every weight vector is normalized to sum to one, so `mu` itself sums to
//! one and the pair `(t_soc, t_temp)` lives on the triangle
//! `{t_soc >= 0, t_temp >= 0, t_soc + t_temp <= 1}`.
//!
//! While discharging, the SoC term works fuller cells harder (`q^b`); while
//! charging it routes more power into emptier cells (`q^-b`). The temperature
//! and resistance terms always prefer cooler (`T^-b`) and lower-resistance
//! (`1/R`) cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two free policy parameters. Feasible iff both are nonnegative and
/// their sum is at most one; the implicit third weight is
/// [`PolicyTheta::resistance_weight`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTheta {
    pub soc_weight: f64,
    pub temp_weight: f64,
}

impl PolicyTheta {
    pub fn new(soc_weight: f64, temp_weight: f64) -> Result<Self> {
        let theta = PolicyTheta {
            soc_weight,
            temp_weight,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.soc_weight.is_finite() || !self.temp_weight.is_finite() {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        if self.soc_weight < 0.0 || self.temp_weight < 0.0 || self.soc_weight + self.temp_weight > 1.0 {
            return Err(Error::Config(format!(
                "policy parameters ({}, {}) outside the feasible triangle",
                self.soc_weight, self.temp_weight
            )));
        }
        Ok(())
    }

    /// Weight left for the resistance term.
    pub fn resistance_weight(&self) -> f64 {
        1.0 - self.soc_weight - self.temp_weight
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.soc_weight, self.temp_weight]
    }
}

/// Sharpness exponents for the SoC and temperature weight terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyHyper {
    pub soc_exponent: f64,
    pub temp_exponent: f64,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper {
            soc_exponent: 8.0,
            temp_exponent: 12.0,
        }
    }
}

impl PolicyHyper {
    pub fn validate(&self) -> Result<()> {
        if !self.soc_exponent.is_finite() || !self.temp_exponent.is_finite() {
            return Err(Error::NonFinite("policy exponents".into()));
        }
        if self.soc_exponent <= 0.0 || self.temp_exponent <= 0.0 {
            return Err(Error::Config("policy exponents must be positive".into()));
        }
        Ok(())
    }
}

/// `base.powf(e)` with an exact-integer fast path; the exponents are small
/// integers in every bundled scenario and this sits on the hot path.
fn pow_stable(base: f64, e: f64) -> f64 {
    if e == e.trunc() && e.abs() <= 64.0 {
        base.powi(e as i32)
    } else {
        base.powf(e)
    }
}

/// SoC weight vector. `discharging` selects the `q^b` form, otherwise
/// `q^-b`. Ratios are taken against the extreme SoC before exponentiation so
/// large exponents cannot overflow.
pub fn weights_soc(socs: &[f64], exponent: f64, discharging: bool) -> Result<Vec<f64>> {
    if socs.is_empty() {
        return Err(Error::Degenerate("empty SoC vector".into()));
    }
    if socs.iter().any(|q| !q.is_finite() || *q < 0.0) {
        return Err(Error::Degenerate("SoC weights need nonnegative finite SoC".into()));
    }
    let raw: Vec<f64> = if discharging {
        let max = socs.iter().cloned().fold(f64::MIN, f64::max);
        if max <= 0.0 {
            return Err(Error::Degenerate("all SoC values are zero".into()));
        }
        socs.iter().map(|q| pow_stable(q / max, exponent)).collect()
    } else {
        let min = socs.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 0.0 {
            return Err(Error::Degenerate(
                "charge-direction SoC weights are undefined at zero SoC".into(),
            ));
        }
        socs.iter().map(|q| pow_stable(min / q, exponent)).collect()
    };
    normalize(raw, "SoC weights")
}

/// Temperature weight vector, `T^-b`: cooler cells get more power.
pub fn weights_temp(temps: &[f64], exponent: f64) -> Result<Vec<f64>> {
    if temps.is_empty() {
        return Err(Error::Degenerate("empty temperature vector".into()));
    }
    if temps.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::Degenerate("temperature weights need positive kelvin values".into()));
    }
    let min = temps.iter().cloned().fold(f64::MAX, f64::min);
    let raw: Vec<f64> = temps.iter().map(|t| pow_stable(min / t, exponent)).collect();
    normalize(raw, "temperature weights")
}

/// Resistance weight vector, `1/R` normalized: the loss-minimizing split for
/// identical open-circuit voltages and ideal converters.
pub fn weights_resistance(resistances: &[f64]) -> Result<Vec<f64>> {
    if resistances.is_empty() {
        return Err(Error::Degenerate("empty resistance vector".into()));
    }
    if resistances.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::Degenerate(
            "resistance weights need strictly positive resistances".into(),
        ));
    }
    let raw: Vec<f64> = resistances.iter().map(|r| 1.0 / r).collect();
    normalize(raw, "resistance weights")
}

fn normalize(raw: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let sum: f64 = raw.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::Degenerate(format!("{what} do not normalize (sum {sum})")));
    }
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Evaluate the policy: share factors for pack power `p_out` at the given
/// per-cell state. At `p_out == 0` there is nothing to split and the
/// resistance weights are returned so downstream bookkeeping stays defined.
pub fn policy_eval(
    theta: &PolicyTheta,
    hyper: &PolicyHyper,
    socs: &[f64],
    temps: &[f64],
    resistances: &[f64],
    p_out: f64,
) -> Result<Vec<f64>> {
    theta.validate()?;
    hyper.validate()?;
    if socs.len() != temps.len() || socs.len() != resistances.len() {
        return Err(Error::Dimension {
            expected: socs.len(),
            got: socs.len().max(temps.len()).max(resistances.len()),
        });
    }
    if !p_out.is_finite() {
        return Err(Error::NonFinite("pack power".into()));
    }
    if p_out == 0.0 {
        return weights_resistance(resistances);
    }

    let w_soc = weights_soc(socs, hyper.soc_exponent, p_out > 0.0)?;
    let w_temp = weights_temp(temps, hyper.temp_exponent)?;
    let w_res = weights_resistance(resistances)?;
    let t_soc = theta.soc_weight;
    let t_temp = theta.temp_weight;
    let t_res = theta.resistance_weight();
    Ok((0..socs.len())
        .map(|j| t_soc * w_soc[j] + t_temp * w_temp[j] + t_res * w_res[j])
        .collect())
}

/// Euclidean projection onto the feasible triangle
/// `{(x, y): x >= 0, y >= 0, x + y <= 1}`.
///
/// Interior points pass through unchanged, so the projection is idempotent.
pub fn project_theta(raw: [f64; 2]) -> PolicyTheta {
    let [x, y] = raw;
    debug_assert!(x.is_finite() && y.is_finite());
    if x >= 0.0 && y >= 0.0 && x + y <= 1.0 {
        return PolicyTheta {
            soc_weight: x,
            temp_weight: y,
        };
    }
    // Exterior point: the projection lies on the boundary, which is the union
    // of three segments. Project onto each and keep the closest.
    let candidates = [
        (x.clamp(0.0, 1.0), 0.0),
        (0.0, y.clamp(0.0, 1.0)),
        {
            // segment x + y = 1, parameterized by t in [0, 1] at (t, 1 - t)
            let t = ((x - y + 1.0) / 2.0).clamp(0.0, 1.0);
            (t, 1.0 - t)
        },
    ];
    let (bx, by) = candidates
        .into_iter()
        .min_by(|a, b| {
            let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
            let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
            da.partial_cmp(&db).expect("distances are finite")
        })
        .expect("three candidates");
    PolicyTheta {
        soc_weight: bx,
        temp_weight: by,
    }
}
