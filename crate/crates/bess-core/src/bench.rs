//! Solve-time benchmarking over a grid of pack and ensemble sizes.
//!
//! Points run sequentially so the per-solve timings are not distorted by
//! contention between grid points; the ensemble parallelism inside each
//! solve is the thing being measured.

use std::path::Path;

use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::sim;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPoint {
    pub cells: usize,
    pub ensemble_size: usize,
    pub steps: usize,
    pub mean_solve_time: f64,
    pub p95_solve_time: f64,
    pub max_solve_time: f64,
    pub mean_iterations: f64,
}

/// Run `steps` closed-loop control steps for every (pack size, ensemble
/// size) pair, scaling the demanded power with the pack so per-cell load
/// stays comparable across sizes.
pub fn bench_grid(
    base: &ScenarioConfig,
    base_dir: &Path,
    sizes: &[usize],
    ensembles: &[usize],
    steps: usize,
) -> Result<Vec<BenchPoint>> {
    if sizes.is_empty() || ensembles.is_empty() {
        return Err(Error::Config("benchmark needs at least one size and one ensemble".into()));
    }
    if steps == 0 {
        return Err(Error::Config("benchmark needs at least one step".into()));
    }
    let mut points = Vec::with_capacity(sizes.len() * ensembles.len());
    for &cells in sizes {
        for &ensemble_size in ensembles {
            let mut cfg = base.clone();
            cfg.pack.cells = cells;
            cfg.solver.ensemble_size = ensemble_size;
            cfg.duration = steps as f64 * cfg.dt;
            let result = sim::run_scenario(&cfg, base_dir)?;

            let mut times: Vec<f64> = result.records.iter().map(|r| r.solve_time).collect();
            times.sort_by(|a, b| a.total_cmp(b));
            let p95_idx = ((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1;
            points.push(BenchPoint {
                cells,
                ensemble_size,
                steps,
                mean_solve_time: times.iter().sum::<f64>() / times.len() as f64,
                p95_solve_time: times[p95_idx],
                max_solve_time: *times.last().expect("at least one step"),
                mean_iterations: result.summary.mean_iterations,
            });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_covers_the_grid_with_positive_times() {
        let mut base = ScenarioConfig::default();
        base.solver.max_iterations = 2;
        let points = bench_grid(&base, Path::new("."), &[1, 2], &[4, 6], 2).unwrap();
        assert_eq!(points.len(), 4);
        for p in &points {
            assert!(p.mean_solve_time > 0.0);
            assert!(p.max_solve_time >= p.p95_solve_time);
            assert!(p.p95_solve_time >= 0.0);
            assert_eq!(p.steps, 2);
            assert!(p.mean_iterations >= 1.0);
        }
        assert_eq!(points[0].cells, 1);
        assert_eq!(points[0].ensemble_size, 4);
        assert_eq!(points[3].cells, 2);
        assert_eq!(points[3].ensemble_size, 6);
    }

    #[test]
    fn bench_rejects_empty_grids() {
        let base = ScenarioConfig::default();
        assert!(bench_grid(&base, Path::new("."), &[], &[4], 2).is_err());
        assert!(bench_grid(&base, Path::new("."), &[2], &[], 2).is_err());
        assert!(bench_grid(&base, Path::new("."), &[2], &[4], 0).is_err());
    }
}
