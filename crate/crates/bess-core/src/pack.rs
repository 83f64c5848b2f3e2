//! Cell-level electro-thermal pack model.
//!
//! Every cell is an equivalent circuit: an open-circuit voltage source u(q)
//! behind the cell's internal series resistance, feeding a per-cell DC/DC
//! converter that is modeled as an additional series resistance. The state of
//! a cell is its state of charge q (dimensionless, in [0, 1]) and a lumped
//! temperature T in kelvin with first-order convection to the environment.
//! Time stepping is forward Euler with a fixed step `dt`.
//!
//! Sign convention used throughout the crate: pack power `p_out > 0`
//! discharges the pack, `p_out < 0` charges it. Share factors `mu` are
//! nonnegative fractions of `|p_out|`; the direction rides on the sign of
//! `p_out`, so cell current `i = mu * p_out / u(q)` is negative while
//! charging.
//!
//! Heating deliberately uses only the internal resistance. Converter loss is
//! dissipated off-cell and shows up in the power accounting but not in the
//! thermal state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear open-circuit voltage curve over state of charge.
///
/// Breakpoints are strictly increasing in SoC with positive voltages.
/// Evaluation clamps to the first/last breakpoint outside the covered range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct OcvCurve {
    points: Vec<(f64, f64)>,
}

impl OcvCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config(
                "OCV curve needs at least two breakpoints".into(),
            ));
        }
        for &(soc, volts) in &points {
            if !soc.is_finite() || !volts.is_finite() {
                return Err(Error::Config("OCV curve contains non-finite values".into()));
            }
            if volts <= 0.0 {
                return Err(Error::Config(format!(
                    "OCV curve voltage must be positive, got {volts} at soc {soc}"
                )));
            }
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "OCV curve breakpoints must be strictly increasing in SoC".into(),
            ));
        }
        Ok(OcvCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Interpolated OCV in volts; clamps outside the breakpoint range.
    pub fn eval(&self, soc: f64) -> f64 {
        let first = self.points[0];
        let last = self.points[self.points.len() - 1];
        if soc <= first.0 {
            return first.1;
        }
        if soc >= last.0 {
            return last.1;
        }
        // partition_point finds the first breakpoint with soc_i > soc; the
        // guards above ensure 1 <= idx < len.
        let idx = self.points.partition_point(|p| p.0 <= soc);
        let (s0, v0) = self.points[idx - 1];
        let (s1, v1) = self.points[idx];
        v0 + (soc - s0) / (s1 - s0) * (v1 - v0)
    }
}

impl Default for OcvCurve {
    /// Generic lithium-ion shape used by the bundled scenarios.
    fn default() -> Self {
        OcvCurve::new(vec![
            (0.0, 3.0),
            (0.1, 3.4),
            (0.5, 3.6),
            (0.9, 4.0),
            (1.0, 4.2),
        ])
        .expect("default curve is valid")
    }
}

impl TryFrom<Vec<(f64, f64)>> for OcvCurve {
    type Error = Error;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self> {
        OcvCurve::new(points)
    }
}

impl From<OcvCurve> for Vec<(f64, f64)> {
    fn from(curve: OcvCurve) -> Self {
        curve.points
    }
}

/// Static per-cell parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Charge capacity in coulombs (ampere-seconds).
    pub capacity: f64,
    /// Internal series resistance in ohms. Heat source for the thermal state.
    pub r_internal: f64,
    /// Series resistance of the cell's DC/DC converter in ohms. Contributes
    /// to electrical loss only.
    pub r_converter: f64,
    /// Lumped thermal capacitance in J/K.
    pub c_thermal: f64,
    /// Convective resistance to the environment in K/W.
    pub r_convection: f64,
}

impl CellParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.capacity,
            self.r_internal,
            self.r_converter,
            self.c_thermal,
            self.r_convection,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config("cell parameters contain non-finite values".into()));
        }
        if self.capacity <= 0.0 || self.c_thermal <= 0.0 || self.r_convection <= 0.0 {
            return Err(Error::Config(
                "capacity, thermal capacitance and convective resistance must be positive".into(),
            ));
        }
        if self.r_internal < 0.0 || self.r_converter < 0.0 {
            return Err(Error::Config("resistances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Snapshot of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub soc: f64,
    /// Kelvin.
    pub temp: f64,
}

/// State of every cell, stored column-wise for cheap slice access.
#[derive(Debug, Clone, PartialEq)]
pub struct PackState {
    socs: Vec<f64>,
    temps: Vec<f64>,
}

impl PackState {
    pub fn new(socs: Vec<f64>, temps: Vec<f64>) -> Result<Self> {
        if socs.len() != temps.len() {
            return Err(Error::Dimension {
                expected: socs.len(),
                got: temps.len(),
            });
        }
        if socs.is_empty() {
            return Err(Error::Degenerate("pack must contain at least one cell".into()));
        }
        for &q in &socs {
            if !q.is_finite() || !(0.0..=1.0).contains(&q) {
                return Err(Error::Degenerate(format!("SoC {q} outside [0, 1]")));
            }
        }
        for &t in &temps {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::Degenerate(format!("temperature {t} K is not physical")));
            }
        }
        Ok(PackState { socs, temps })
    }

    pub fn uniform(n: usize, soc: f64, temp: f64) -> Result<Self> {
        PackState::new(vec![soc; n], vec![temp; n])
    }

    pub fn len(&self) -> usize {
        self.socs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.socs.is_empty()
    }

    pub fn socs(&self) -> &[f64] {
        &self.socs
    }

    pub fn temps(&self) -> &[f64] {
        &self.temps
    }

    pub fn cell(&self, j: usize) -> CellState {
        CellState {
            soc: self.socs[j],
            temp: self.temps[j],
        }
    }

    pub fn mean_soc(&self) -> f64 {
        self.socs.iter().sum::<f64>() / self.socs.len() as f64
    }

    pub fn mean_temp(&self) -> f64 {
        self.temps.iter().sum::<f64>() / self.temps.len() as f64
    }

    /// Largest |q_j - mean(q)| over the pack.
    pub fn max_soc_deviation(&self) -> f64 {
        let mean = self.mean_soc();
        self.socs
            .iter()
            .map(|q| (q - mean).abs())
            .fold(0.0, f64::max)
    }

    /// Largest |T_j - mean(T)| over the pack, in kelvin.
    pub fn max_temp_deviation(&self) -> f64 {
        let mean = self.mean_temp();
        self.temps
            .iter()
            .map(|t| (t - mean).abs())
            .fold(0.0, f64::max)
    }
}

/// Everything static about the plant: per-cell parameters, the shared OCV
/// curve, the ambient temperature and the integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub params: Vec<CellParams>,
    pub curve: OcvCurve,
    /// Ambient temperature in kelvin.
    pub env_temp: f64,
    /// Integration step in seconds.
    pub dt: f64,
}

impl Plant {
    pub fn new(params: Vec<CellParams>, curve: OcvCurve, env_temp: f64, dt: f64) -> Result<Self> {
        let plant = Plant {
            params,
            curve,
            env_temp,
            dt,
        };
        plant.validate()?;
        Ok(plant)
    }

    /// Identical parameters for every cell.
    pub fn uniform(n: usize, params: CellParams, curve: OcvCurve, env_temp: f64, dt: f64) -> Result<Self> {
        Plant::new(vec![params; n], curve, env_temp, dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config("plant must contain at least one cell".into()));
        }
        for p in &self.params {
            p.validate()?;
        }
        if !self.env_temp.is_finite() || self.env_temp <= 0.0 {
            return Err(Error::Config(format!(
                "ambient temperature {} K is not physical",
                self.env_temp
            )));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::Config(format!("time step {} s must be positive", self.dt)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn r_internal(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().map(|p| p.r_internal)
    }
}

/// Cell current in amperes for a share `mu` of pack power `p_out` at OCV `ocv`.
pub fn cell_current(mu: f64, p_out: f64, ocv: f64) -> f64 {
    mu * p_out / ocv
}

/// Terminal voltage under load: OCV minus the internal-resistance drop.
pub fn terminal_voltage(ocv: f64, r_internal: f64, current: f64) -> f64 {
    ocv - r_internal * current
}

/// Electrical loss in watts across internal plus converter resistance.
/// Even in `p_out`: charging at the same magnitude dissipates the same power.
pub fn power_loss(params: &CellParams, mu: f64, p_out: f64, ocv: f64) -> f64 {
    let i = cell_current(mu, p_out, ocv);
    (params.r_internal + params.r_converter) * i * i
}

/// One forward-Euler SoC update. Returns the new SoC and whether it had to be
/// clamped into [0, 1].
pub fn soc_step(soc: f64, params: &CellParams, ocv: f64, mu: f64, p_out: f64, dt: f64) -> (f64, bool) {
    let next = soc - dt * mu * p_out / (params.capacity * ocv);
    let clamped = !(0.0..=1.0).contains(&next);
    (next.clamp(0.0, 1.0), clamped)
}

/// One forward-Euler temperature update in kelvin. The heat source is the
/// internal-resistance loss only; convection relaxes toward `env_temp`.
pub fn temp_step(
    temp: f64,
    params: &CellParams,
    ocv: f64,
    mu: f64,
    p_out: f64,
    env_temp: f64,
    dt: f64,
) -> f64 {
    let i = cell_current(mu, p_out, ocv);
    let heat = params.r_internal * i * i;
    temp + dt * (heat - (temp - env_temp) / params.r_convection) / params.c_thermal
}

/// Advance the whole pack by one step of `plant.dt`.
///
/// Returns the next state and a flag that is true when any cell's SoC was
/// clamped at the [0, 1] boundary. Errors on dimension mismatch or any
/// non-finite input or output.
pub fn pack_step(plant: &Plant, state: &PackState, mu: &[f64], p_out: f64) -> Result<(PackState, bool)> {
    let n = plant.len();
    if state.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: state.len(),
        });
    }
    if mu.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: mu.len(),
        });
    }
    if !p_out.is_finite() || mu.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("pack step input".into()));
    }

    let mut socs = Vec::with_capacity(n);
    let mut temps = Vec::with_capacity(n);
    let mut any_clamped = false;
    for j in 0..n {
        let params = &plant.params[j];
        let ocv = plant.curve.eval(state.socs[j]);
        let (q, clamped) = soc_step(state.socs[j], params, ocv, mu[j], p_out, plant.dt);
        let t = temp_step(
            state.temps[j],
            params,
            ocv,
            mu[j],
            p_out,
            plant.env_temp,
            plant.dt,
        );
        if !q.is_finite() || !t.is_finite() {
            return Err(Error::NonFinite(format!("cell {j} state after step")));
        }
        any_clamped |= clamped;
        socs.push(q);
        temps.push(t);
    }
    Ok((PackState { socs, temps }, any_clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn table_params() -> CellParams {
        CellParams {
            capacity: 9000.0, // 2.5 Ah
            r_internal: 0.03,
            r_converter: 0.01,
            c_thermal: 40.23,
            r_convection: 41.05,
        }
    }

    #[test]
    fn ocv_hits_breakpoints_and_interpolates() {
        let curve = OcvCurve::default();
        assert_eq!(curve.eval(0.5), 3.6);
        assert_eq!(curve.eval(0.0), 3.0);
        assert_eq!(curve.eval(1.0), 4.2);
        // midpoint of the (0.5, 3.6) - (0.9, 4.0) segment
        assert_relative_eq!(curve.eval(0.7), 3.8, max_relative = 1e-12);
        assert_relative_eq!(curve.eval(0.3), 3.5, max_relative = 1e-12);
    }

    #[test]
    fn ocv_clamps_outside_range() {
        let curve = OcvCurve::default();
        assert_eq!(curve.eval(-0.2), 3.0);
        assert_eq!(curve.eval(1.3), 4.2);
    }

    #[test]
    fn ocv_rejects_bad_curves() {
        assert!(OcvCurve::new(vec![(0.0, 3.0)]).is_err());
        assert!(OcvCurve::new(vec![(0.0, 3.0), (0.0, 3.1)]).is_err());
        assert!(OcvCurve::new(vec![(0.5, 3.0), (0.2, 3.1)]).is_err());
        assert!(OcvCurve::new(vec![(0.0, -1.0), (1.0, 3.0)]).is_err());
        assert!(OcvCurve::new(vec![(0.0, f64::NAN), (1.0, 3.0)]).is_err());
    }

    #[test]
    fn current_matches_hand_value() {
        // mu = 0.02 of 1000 W at 3.6 V
        let i = cell_current(0.02, 1000.0, 3.6);
        assert_relative_eq!(i, 5.5556, max_relative = 1e-4);
    }

    #[test]
    fn current_is_odd_in_power() {
        let i_dis = cell_current(0.02, 1000.0, 3.6);
        let i_chg = cell_current(0.02, -1000.0, 3.6);
        assert_eq!(i_dis, -i_chg);
    }

    #[test]
    fn terminal_voltage_drops_under_load() {
        assert_relative_eq!(terminal_voltage(3.6, 0.03, 5.0), 3.45, max_relative = 1e-12);
        // charging raises the terminal voltage above OCV
        assert_relative_eq!(terminal_voltage(3.6, 0.03, -5.0), 3.75, max_relative = 1e-12);
    }

    #[test]
    fn power_loss_matches_hand_value() {
        let p = CellParams {
            r_internal: 0.03,
            r_converter: 0.01,
            ..table_params()
        };
        // (R + Rc) * mu^2 * P^2 / u^2 = 0.04 * 4e-4 * 1e6 / 12.96
        let loss = power_loss(&p, 0.02, 1000.0, 3.6);
        assert_relative_eq!(loss, 1.23457, max_relative = 1e-5);
    }

    #[test]
    fn power_loss_is_even_in_power() {
        let p = table_params();
        assert_eq!(power_loss(&p, 0.02, 1000.0, 3.6), power_loss(&p, 0.02, -1000.0, 3.6));
    }

    #[test]
    fn soc_step_matches_hand_value() {
        let p = table_params();
        // 0.7 - 1 * 0.01 * 1000 / (9000 * 3.6)
        let (q, clamped) = soc_step(0.7, &p, 3.6, 0.01, 1000.0, 1.0);
        assert_relative_eq!(q, 0.6996914, max_relative = 1e-7);
        assert!(!clamped);
        // charging mirrors the decrement
        let (q, _) = soc_step(0.7, &p, 3.6, 0.01, -1000.0, 1.0);
        assert_relative_eq!(q, 0.7003086, max_relative = 1e-7);
    }

    #[test]
    fn soc_step_clamps_and_flags() {
        let p = table_params();
        let (q, clamped) = soc_step(0.9999, &p, 3.6, 0.01, -1000.0, 10.0);
        assert_eq!(q, 1.0);
        assert!(clamped);
        let (q, clamped) = soc_step(0.0001, &p, 3.6, 0.01, 1000.0, 10.0);
        assert_eq!(q, 0.0);
        assert!(clamped);
    }

    #[test]
    fn charge_drawn_balances_soc_change() {
        // i * dt = -Q * dq for any unclamped step
        let p = table_params();
        for &(mu, p_out, soc) in &[(0.013, 850.0, 0.62), (0.02, -400.0, 0.31), (0.0, 1000.0, 0.5)] {
            let ocv = OcvCurve::default().eval(soc);
            let (q_next, clamped) = soc_step(soc, &p, ocv, mu, p_out, 1.0);
            assert!(!clamped);
            let i = cell_current(mu, p_out, ocv);
            assert_relative_eq!(i * 1.0, -p.capacity * (q_next - soc), max_relative = 1e-12);
        }
    }

    #[test]
    fn temp_step_pure_cooling_matches_hand_value() {
        let p = table_params();
        // 300 - (300 - 298) / (41.05 * 40.23)
        let t = temp_step(300.0, &p, 3.6, 0.0, 0.0, 298.0, 1.0);
        assert_relative_eq!(t, 299.998789, max_relative = 1e-9);
    }

    #[test]
    fn temp_step_heating_matches_hand_value() {
        let p = table_params();
        // 298 + (0.03 * 400 / 12.96) / 40.23 with converter loss excluded
        let t = temp_step(298.0, &p, 3.6, 0.02, 1000.0, 298.0, 1.0);
        assert_relative_eq!(t, 298.02301, max_relative = 1e-7);
    }

    #[test]
    fn cooling_is_a_fixed_geometric_decay() {
        let p = table_params();
        let factor = 1.0 - 1.0 / (p.r_convection * p.c_thermal);
        for &t0 in &[350.0, 305.2, 298.0, 260.0] {
            let t1 = temp_step(t0, &p, 3.6, 0.0, 0.0, 298.0, 1.0);
            assert_relative_eq!(t1 - 298.0, (t0 - 298.0) * factor, epsilon = 1e-12);
        }
    }

    #[test]
    fn heating_ignores_converter_resistance() {
        let base = table_params();
        let bigger_converter = CellParams {
            r_converter: 0.5,
            ..base
        };
        let t_a = temp_step(298.0, &base, 3.6, 0.02, 1000.0, 298.0, 1.0);
        let t_b = temp_step(298.0, &bigger_converter, 3.6, 0.02, 1000.0, 298.0, 1.0);
        assert_eq!(t_a, t_b);
        // ... but the electrical loss does see it
        assert!(power_loss(&bigger_converter, 0.02, 1000.0, 3.6) > power_loss(&base, 0.02, 1000.0, 3.6));
    }

    #[test]
    fn pack_step_advances_all_cells() {
        let plant = Plant::uniform(3, table_params(), OcvCurve::default(), 298.0, 1.0).unwrap();
        let state = PackState::uniform(3, 0.7, 298.0).unwrap();
        let (next, clamped) = pack_step(&plant, &state, &[0.4, 0.3, 0.3], 30.0).unwrap();
        assert!(!clamped);
        assert_eq!(next.len(), 3);
        // discharge lowers SoC, cell 0 fastest
        assert!(next.socs().iter().all(|&q| q < 0.7));
        assert!(next.socs()[0] < next.socs()[1]);
        // resistive heating raises temperature
        assert!(next.temps().iter().all(|&t| t > 298.0));
    }

    #[test]
    fn pack_step_zero_power_holds_soc_and_cools() {
        let plant = Plant::uniform(2, table_params(), OcvCurve::default(), 298.0, 1.0).unwrap();
        let state = PackState::new(vec![0.6, 0.8], vec![305.0, 299.0]).unwrap();
        let (next, clamped) = pack_step(&plant, &state, &[0.5, 0.5], 0.0).unwrap();
        assert!(!clamped);
        assert_eq!(next.socs(), state.socs());
        assert!(next.temps()[0] < 305.0 && next.temps()[0] > 298.0);
        assert!(next.temps()[1] < 299.0 && next.temps()[1] > 298.0);
    }

    #[test]
    fn pack_step_rejects_bad_input() {
        let plant = Plant::uniform(2, table_params(), OcvCurve::default(), 298.0, 1.0).unwrap();
        let state = PackState::uniform(2, 0.5, 298.0).unwrap();
        assert!(matches!(
            pack_step(&plant, &state, &[0.5], 100.0),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            pack_step(&plant, &state, &[0.5, f64::NAN], 100.0),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            pack_step(&plant, &state, &[0.5, 0.5], f64::INFINITY),
            Err(Error::NonFinite(_))
        ));
        let small = PackState::uniform(1, 0.5, 298.0).unwrap();
        assert!(pack_step(&plant, &small, &[0.5, 0.5], 100.0).is_err());
    }

    #[test]
    fn state_and_params_validation() {
        assert!(PackState::new(vec![0.5], vec![298.0, 299.0]).is_err());
        assert!(PackState::new(vec![], vec![]).is_err());
        assert!(PackState::new(vec![1.2], vec![298.0]).is_err());
        assert!(PackState::new(vec![0.5], vec![-3.0]).is_err());
        assert!(PackState::new(vec![f64::NAN], vec![298.0]).is_err());

        let mut p = table_params();
        assert!(p.validate().is_ok());
        p.capacity = 0.0;
        assert!(p.validate().is_err());
        p = table_params();
        p.r_internal = -0.01;
        assert!(p.validate().is_err());
        p = table_params();
        p.r_converter = 0.0; // allowed: ideal converter
        assert!(p.validate().is_ok());

        assert!(Plant::uniform(2, table_params(), OcvCurve::default(), 298.0, 0.0).is_err());
        assert!(Plant::uniform(2, table_params(), OcvCurve::default(), -1.0, 1.0).is_err());
        assert!(Plant::new(vec![], OcvCurve::default(), 298.0, 1.0).is_err());
    }

    #[test]
    fn deviations_are_computed_against_the_mean() {
        let state = PackState::new(vec![0.7, 0.74, 0.72], vec![298.0, 299.0, 300.5]).unwrap();
        assert_relative_eq!(state.mean_soc(), 0.72, max_relative = 1e-12);
        assert_relative_eq!(state.max_soc_deviation(), 0.02, max_relative = 1e-9);
        assert_relative_eq!(state.max_temp_deviation(), 300.5 - 299.16666666666666, epsilon = 1e-9);
    }
}
