//! Demanded pack power as a function of time. Positive power discharges.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PowerProfile {
    Constant {
        power: f64,
    },
    /// Starts at +amplitude and flips sign every `half_period` seconds.
    SquareWave {
        amplitude: f64,
        half_period: f64,
    },
    /// Step function: level `powers[i]` holds on `[times[i], times[i+1])`,
    /// and the final level extends past the last breakpoint. Times before
    /// `times[0]` are out of range.
    Piecewise {
        times: Vec<f64>,
        powers: Vec<f64>,
    },
}

impl PowerProfile {
    pub fn validate(&self) -> Result<()> {
        match self {
            PowerProfile::Constant { power } => {
                if !power.is_finite() {
                    return Err(Error::Config("constant profile power must be finite".into()));
                }
            }
            PowerProfile::SquareWave { amplitude, half_period } => {
                if !amplitude.is_finite() {
                    return Err(Error::Config("square wave amplitude must be finite".into()));
                }
                if !half_period.is_finite() || *half_period <= 0.0 {
                    return Err(Error::Config("square wave half period must be positive".into()));
                }
            }
            PowerProfile::Piecewise { times, powers } => {
                if times.is_empty() {
                    return Err(Error::Config("piecewise profile needs at least one breakpoint".into()));
                }
                if times.len() != powers.len() {
                    return Err(Error::Dimension { expected: times.len(), got: powers.len() });
                }
                if times.iter().any(|t| !t.is_finite()) || powers.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Config("piecewise profile values must be finite".into()));
                }
                if times.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("piecewise breakpoints must be strictly increasing".into()));
                }
            }
        }
        Ok(())
    }

    pub fn power_at(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::ProfileRange { t, start: 0.0, end: f64::INFINITY });
        }
        match self {
            PowerProfile::Constant { power } => Ok(*power),
            PowerProfile::SquareWave { amplitude, half_period } => {
                let phase = (t / half_period).floor() as i64;
                Ok(if phase % 2 == 0 { *amplitude } else { -*amplitude })
            }
            PowerProfile::Piecewise { times, powers } => {
                if t < times[0] {
                    return Err(Error::ProfileRange {
                        t,
                        start: times[0],
                        end: f64::INFINITY,
                    });
                }
                // index of the last breakpoint at or before t
                let idx = times.partition_point(|&bt| bt <= t) - 1;
                Ok(powers[idx])
            }
        }
    }

    /// Powers at `t0, t0 + dt, ..., t0 + (count - 1) dt`, the lookahead
    /// window the receding-horizon loop feeds to the solver.
    pub fn samples(&self, t0: f64, dt: f64, count: usize) -> Result<Vec<f64>> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::Config("profile sample spacing must be positive".into()));
        }
        (0..count).map(|k| self.power_at(t0 + k as f64 * dt)).collect()
    }

    /// Parse a piecewise profile from CSV with header `t,power`.
    pub fn piecewise_from_csv(reader: impl Read) -> Result<PowerProfile> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?;
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "power" {
            return Err(Error::Csv(format!(
                "expected header \"t,power\", got \"{}\"",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times = Vec::new();
        let mut powers = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Csv(e.to_string()))?;
            if record.len() != 2 {
                return Err(Error::Csv(format!(
                    "row {}: expected 2 fields, got {}",
                    row + 1,
                    record.len()
                )));
            }
            let t: f64 = record[0]
                .parse()
                .map_err(|_| Error::Csv(format!("row {}: bad time {:?}", row + 1, &record[0])))?;
            let p: f64 = record[1]
                .parse()
                .map_err(|_| Error::Csv(format!("row {}: bad power {:?}", row + 1, &record[1])))?;
            times.push(t);
            powers.push(p);
        }
        let profile = PowerProfile::Piecewise { times, powers };
        profile.validate()?;
        Ok(profile)
    }

    pub fn piecewise_from_csv_path(path: impl AsRef<Path>) -> Result<PowerProfile> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        PowerProfile::piecewise_from_csv(file)
    }
}

impl Default for PowerProfile {
    /// The reference duty cycle: 1 kW square wave flipping every 20 minutes.
    fn default() -> Self {
        PowerProfile::SquareWave {
            amplitude: 1000.0,
            half_period: 1200.0,
        }
    }
}
