//! Scenario configuration: everything a closed-loop run needs, loadable
//! from JSON. Every field has a default, so `{}` is a valid config and a
//! file only has to spell out what it changes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enki::EnkiConfig;
use crate::error::{Error, Result};
use crate::objective::{BarrierConfig, Limits};
use crate::pack::{CellParams, OcvCurve, PackState, Plant};
use crate::policy::PolicyHyper;
use crate::profile::PowerProfile;

/// Scalar that is either fixed, drawn uniformly from a range, or listed
/// explicitly per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Draw {
    Fixed(f64),
    Range { min: f64, max: f64 },
    List(Vec<f64>),
}

impl Draw {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Draw::Fixed(v) => {
                if !v.is_finite() {
                    return Err(Error::Config(format!("{name}: value must be finite")));
                }
            }
            Draw::Range { min, max } => {
                if !min.is_finite() || !max.is_finite() || min > max {
                    return Err(Error::Config(format!("{name}: need min <= max and finite bounds")));
                }
            }
            Draw::List(values) => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("{name}: list entries must be finite")));
                }
            }
        }
        Ok(())
    }

    /// One value per cell. Ranges consume `count` draws from `rng`.
    fn realize(&self, count: usize, rng: &mut impl Rng, name: &str) -> Result<Vec<f64>> {
        self.validate(name)?;
        match self {
            Draw::Fixed(v) => Ok(vec![*v; count]),
            Draw::Range { min, max } => {
                Ok((0..count).map(|_| rng.random_range(*min..=*max)).collect())
            }
            Draw::List(values) => {
                if values.len() != count {
                    return Err(Error::Dimension { expected: count, got: values.len() });
                }
                Ok(values.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    pub cells: usize,
    /// Cell capacity in ampere-seconds.
    pub capacity: f64,
    pub r_internal: Draw,
    pub r_converter: f64,
    pub c_thermal: f64,
    pub r_convection: f64,
    pub env_temp: f64,
    pub ocv: OcvCurve,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            cells: 100,
            capacity: 9000.0,
            r_internal: Draw::Range { min: 0.03, max: 0.04 },
            r_converter: 0.01,
            c_thermal: 40.23,
            r_convection: 41.05,
            env_temp: 298.0,
            ocv: OcvCurve::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialStateConfig {
    pub soc: Draw,
    pub temp: Draw,
}

impl Default for InitialStateConfig {
    fn default() -> Self {
        InitialStateConfig {
            soc: Draw::Range { min: 0.70, max: 0.75 },
            temp: Draw::Fixed(298.0),
        }
    }
}

/// Either an inline profile or a pointer to a piecewise CSV file. Relative
/// paths resolve against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileConfig {
    Inline(PowerProfile),
    Csv { csv: PathBuf },
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig::Inline(PowerProfile::default())
    }
}

impl ProfileConfig {
    pub fn build(&self, base_dir: &Path) -> Result<PowerProfile> {
        match self {
            ProfileConfig::Inline(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            ProfileConfig::Csv { csv } => {
                let path = if csv.is_absolute() { csv.clone() } else { base_dir.join(csv) };
                PowerProfile::piecewise_from_csv_path(path)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    pub enabled: bool,
    /// Eigenvalue floor applied to the posterior covariance before it seeds
    /// the next step's prior, keeping the ensemble from collapsing.
    pub cov_floor: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig { enabled: true, cov_floor: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub pack: PackConfig,
    pub initial: InitialStateConfig,
    pub profile: ProfileConfig,
    /// Lookahead steps beyond the current one; the solver sees horizon + 1
    /// stage measurements per rollout.
    pub horizon: usize,
    pub dt: f64,
    pub duration: f64,
    pub limits: Limits,
    pub barrier: BarrierConfig,
    pub hyper: PolicyHyper,
    pub solver: EnkiConfig,
    pub warm_start: WarmStartConfig,
    /// Master seed: initial-state draws and the per-step solver seeds all
    /// derive from it.
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            pack: PackConfig::default(),
            initial: InitialStateConfig::default(),
            profile: ProfileConfig::default(),
            horizon: 10,
            dt: 1.0,
            duration: 3600.0,
            limits: Limits::default(),
            barrier: BarrierConfig::default(),
            hyper: PolicyHyper::default(),
            solver: EnkiConfig::default(),
            warm_start: WarmStartConfig::default(),
            seed: 1,
        }
    }
}

/// A scenario with all draws realized, ready to simulate.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub plant: Plant,
    pub initial_state: PackState,
    pub profile: PowerProfile,
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pack.cells == 0 {
            return Err(Error::Config("pack needs at least one cell".into()));
        }
        self.pack.r_internal.validate("pack.r_internal")?;
        self.initial.soc.validate("initial.soc")?;
        self.initial.temp.validate("initial.temp")?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !self.duration.is_finite() || self.duration < self.dt {
            return Err(Error::Config("duration must cover at least one step".into()));
        }
        let steps = self.duration / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Config("duration must be a whole number of dt steps".into()));
        }
        self.barrier.validate()?;
        if !self.warm_start.cov_floor.is_finite() || self.warm_start.cov_floor < 0.0 {
            return Err(Error::Config("warm start covariance floor must be nonnegative".into()));
        }
        self.limits.validate()?;
        self.hyper.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    /// Number of control steps in the run.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Realize all random draws. Order is fixed (resistances, then states of
    /// charge, then temperatures) so results are reproducible per seed.
    pub fn build(&self, base_dir: &Path) -> Result<BuiltScenario> {
        self.validate()?;
        let n = self.pack.cells;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let resistances = self.pack.r_internal.realize(n, &mut rng, "pack.r_internal")?;
        let socs = self.initial.soc.realize(n, &mut rng, "initial.soc")?;
        let temps = self.initial.temp.realize(n, &mut rng, "initial.temp")?;

        let params: Vec<CellParams> = resistances
            .into_iter()
            .map(|r| CellParams {
                capacity: self.pack.capacity,
                r_internal: r,
                r_converter: self.pack.r_converter,
                c_thermal: self.pack.c_thermal,
                r_convection: self.pack.r_convection,
            })
            .collect();
        let plant = Plant::new(params, self.pack.ocv.clone(), self.pack.env_temp, self.dt)?;
        let initial_state = PackState::new(socs, temps)?;
        let profile = self.profile.build(base_dir)?;
        // the receding horizon looks this far past the end of the run
        profile.power_at(0.0)?;
        profile.power_at(self.duration + self.horizon as f64 * self.dt)?;
        Ok(BuiltScenario { plant, initial_state, profile })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn default_config_validates_and_builds() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.steps(), 3600);
        let built = cfg.build(Path::new(".")).unwrap();
        assert_eq!(built.plant.len(), 100);
        assert_eq!(built.initial_state.len(), 100);
        for r in built.plant.r_internal() {
            assert!((0.03..=0.04).contains(&r));
        }
        for &q in built.initial_state.socs() {
            assert!((0.70..=0.75).contains(&q));
        }
        for &t in built.initial_state.temps() {
            assert_eq!(t, 298.0);
        }
    }

    #[test]
    fn building_is_deterministic_per_seed() {
        let cfg = ScenarioConfig::default();
        let a = cfg.build(Path::new(".")).unwrap();
        let b = cfg.build(Path::new(".")).unwrap();
        assert_eq!(a.initial_state, b.initial_state);
        assert_eq!(
            a.plant.r_internal().collect::<Vec<_>>(),
            b.plant.r_internal().collect::<Vec<_>>()
        );

        let other = ScenarioConfig { seed: 2, ..ScenarioConfig::default() };
        let c = other.build(Path::new(".")).unwrap();
        assert_ne!(
            a.plant.r_internal().collect::<Vec<_>>(),
            c.plant.r_internal().collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_json_is_the_default_config() {
        let cfg = ScenarioConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
    }

    #[test]
    fn partial_overrides_keep_remaining_defaults() {
        let cfg = ScenarioConfig::from_json_str(
            r#"{"pack": {"cells": 4, "r_internal": 0.03}, "horizon": 3, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(cfg.pack.cells, 4);
        assert_eq!(cfg.pack.r_internal, Draw::Fixed(0.03));
        assert_eq!(cfg.pack.capacity, 9000.0);
        assert_eq!(cfg.horizon, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dt, 1.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ScenarioConfig::from_json_str(r#"{"cellz": 10}"#).is_err());
        assert!(ScenarioConfig::from_json_str(r#"{"pack": {"cellz": 10}}"#).is_err());
    }

    #[test]
    fn draw_variants_parse_from_number_object_and_array() {
        let cfg = ScenarioConfig::from_json_str(
            r#"{"initial": {"soc": 0.5, "temp": [298.0, 299.0]}, "pack": {"cells": 2}}"#,
        )
        .unwrap();
        assert_eq!(cfg.initial.soc, Draw::Fixed(0.5));
        assert_eq!(cfg.initial.temp, Draw::List(vec![298.0, 299.0]));
        let built = cfg.build(Path::new(".")).unwrap();
        assert_eq!(built.initial_state.temps(), &[298.0, 299.0]);
    }

    #[test]
    fn list_length_must_match_cell_count() {
        let cfg = ScenarioConfig::from_json_str(
            r#"{"pack": {"cells": 3, "r_internal": [0.03, 0.04]}}"#,
        )
        .unwrap();
        assert!(matches!(
            cfg.build(Path::new(".")),
            Err(Error::Dimension { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn validation_rejects_inconsistent_scenarios() {
        let mut cfg = ScenarioConfig::default();
        cfg.dt = 0.0;
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.duration = 0.5; // below one dt
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.duration = 10.5; // not a whole number of steps
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.horizon = 0;
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.pack.cells = 0;
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.pack.r_internal = Draw::Range { min: 0.05, max: 0.01 };
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.warm_start.cov_floor = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_profiles_resolve_relative_to_the_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("profile.csv");
        let mut f = std::fs::File::create(&csv_path).unwrap();
        writeln!(f, "t,power\n0,500\n600,-500").unwrap();

        let cfg = ScenarioConfig::from_json_str(r#"{"profile": {"csv": "profile.csv"}}"#).unwrap();
        let built = cfg.build(dir.path()).unwrap();
        assert_eq!(built.profile.power_at(0.0).unwrap(), 500.0);
        assert_eq!(built.profile.power_at(700.0).unwrap(), -500.0);

        let missing = ScenarioConfig::from_json_str(r#"{"profile": {"csv": "nope.csv"}}"#).unwrap();
        match missing.build(dir.path()) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("nope.csv")),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn json_round_trip_preserves_the_config() {
        let cfg = ScenarioConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ScenarioConfig::from_json_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
