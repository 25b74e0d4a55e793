//! One entry point for all four schemes, and cross-scheme comparison.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::euler::{self, EulerRunConfig, EulerScheme, MassRecord, Snapshot, WaveSpeedMode};
use crate::lagrange::{self, groups_to_grid, HeadwayRule, LagrangeOutput, LagrangeRunConfig};
use crate::model::GridState;
use crate::scenario::{Scenario, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Mesh size; for the Lagrangian scheme, the grid groups are binned on.
    pub cells: usize,
    pub cfl: f64,
    pub group_size: f64,
    pub rule: HeadwayRule,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme) -> Self {
        let (cells, cfl) = scheme.default_resolution();
        SchemeConfig {
            scheme,
            cells,
            cfl,
            group_size: 5.0,
            rule: HeadwayRule::default(),
        }
    }

    pub fn with_cells(mut self, cells: usize) -> Self {
        self.cells = cells;
        self
    }

    pub fn with_cfl(mut self, cfl: f64) -> Self {
        self.cfl = cfl;
        self
    }

    pub fn with_group_size(mut self, group_size: f64) -> Self {
        self.group_size = group_size;
        self
    }

    /// Settings taken from the scenario's run section.
    pub fn from_scenario(scenario: &Scenario) -> Self {
        SchemeConfig {
            scheme: scenario.run.scheme,
            cells: scenario.run.cells,
            cfl: scenario.run.cfl,
            group_size: scenario.run.group_size,
            rule: HeadwayRule::default(),
        }
    }

    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::Lagrange => format!("lagrange-g{}", self.group_size),
            s => format!("{}-{}-cfl{}", s.name(), self.cells, self.cfl),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SchemeConfig,
    /// Grid snapshots; Lagrangian runs are binned onto `config.cells` cells.
    pub snapshots: Vec<Snapshot>,
    pub mass: Vec<MassRecord>,
    pub evaluations: u64,
    pub steps: usize,
    pub dt: f64,
    pub wall_clock: Duration,
    pub groups: Option<LagrangeOutput>,
}

impl Simulation {
    /// Largest relative deviation of any class mass from its initial value.
    pub fn mass_drift(&self, n_classes: usize) -> Vec<f64> {
        (0..n_classes)
            .map(|d| {
                let rows: Vec<f64> = self.mass.iter().filter(|r| r.class == d).map(|r| r.mass).collect();
                let m0 = rows.first().copied().unwrap_or(0.0);
                rows.iter()
                    .map(|m| (m - m0).abs())
                    .fold(0.0, f64::max)
                    / m0.abs().max(f64::MIN_POSITIVE)
            })
            .collect()
    }
}

/// Runs `config` on the scenario's initial data. `duration` and
/// `snapshot_every` default to the scenario's run section.
pub fn simulate(
    scenario: &Scenario,
    config: &SchemeConfig,
    duration: Option<f64>,
    snapshot_every: Option<f64>,
) -> Result<Simulation> {
    let duration = duration.unwrap_or(scenario.run.duration);
    let snapshot_every = snapshot_every.unwrap_or(if duration == scenario.run.duration {
        scenario.run.snapshot_every
    } else {
        duration
    });
    let initial = scenario.initial_grid(config.cells)?;
    let solver = scenario.run.solver;
    let start = Instant::now();
    match config.scheme {
        Scheme::Lagrange => {
            let cfg = LagrangeRunConfig {
                group_size: config.group_size,
                cfl: config.cfl,
                duration,
                snapshot_every,
                rule: config.rule,
                solver,
            };
            let out = lagrange::run(&scenario.spec, &initial, &cfg)?;
            let wall_clock = start.elapsed();
            let snapshots = out
                .snapshots
                .iter()
                .map(|s| {
                    Ok(Snapshot {
                        time: s.time,
                        state: groups_to_grid(&s.state, scenario.spec.n_classes(), config.cells)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Simulation {
                config: *config,
                snapshots,
                mass: out.mass.clone(),
                evaluations: out.evaluations,
                steps: out.steps,
                dt: out.dt,
                wall_clock,
                groups: Some(out),
            })
        }
        scheme => {
            let cfg = EulerRunConfig {
                scheme: EulerScheme::try_from(scheme)?,
                cells: config.cells,
                cfl: config.cfl,
                duration,
                snapshot_every,
                solver,
                wave_speed: WaveSpeedMode::default(),
            };
            let out = euler::run(&scenario.spec, &initial, &cfg)?;
            Ok(Simulation {
                config: *config,
                snapshots: out.snapshots,
                mass: out.mass,
                evaluations: out.evaluations,
                steps: out.steps,
                dt: out.dt,
                wall_clock: start.elapsed(),
                groups: None,
            })
        }
    }
}

/// ‖a − reference‖₁ / ‖reference‖₁ for one class, after projecting both onto
/// the finer of the two meshes. Zero when both profiles vanish.
pub fn relative_l1(a: &GridState, reference: &GridState, class: usize) -> Result<f64> {
    let cells = a.n_cells().max(reference.n_cells());
    let (a, r) = (a.resample(cells)?, reference.resample(cells)?);
    let (pa, pr) = (a.class_profile(class), r.class_profile(class));
    let diff: f64 = pa.iter().zip(&pr).map(|(x, y)| (x - y).abs()).sum();
    let norm: f64 = pr.iter().map(|y| y.abs()).sum();
    Ok(if norm == 0.0 {
        if diff == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        diff / norm
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub label: String,
    pub config: SchemeConfig,
    pub evaluations: u64,
    pub steps: usize,
    pub mass_drift: Vec<f64>,
    /// Seconds; kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distance {
    pub scheme: String,
    pub reference: String,
    pub class: String,
    pub time: f64,
    pub relative_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub schemes: Vec<SchemeSummary>,
    pub distances: Vec<Distance>,
}

impl ComparisonReport {
    pub fn distance(&self, scheme: &str, reference: &str, class: &str, time: f64) -> Option<f64> {
        self.distances
            .iter()
            .find(|d| d.scheme == scheme && d.reference == reference && d.class == class && d.time == time)
            .map(|d| d.relative_l1)
    }
}

/// Distances of every later run against every earlier one, per class and
/// snapshot time. Runs must share snapshot times.
pub fn compare(scenario: &Scenario, runs: &[Simulation]) -> Result<ComparisonReport> {
    if runs.len() < 2 {
        return Err(Error::invalid("compare", "at least two scheme configurations required"));
    }
    let n_classes = scenario.spec.n_classes();
    let times: Vec<f64> = runs[0].snapshots.iter().map(|s| s.time).collect();
    for r in runs {
        let t: Vec<f64> = r.snapshots.iter().map(|s| s.time).collect();
        if t != times {
            return Err(Error::invalid("compare", "runs have different snapshot times"));
        }
    }
    let mut distances = Vec::new();
    for (j, run) in runs.iter().enumerate() {
        for reference in &runs[..j] {
            for (d, class) in scenario.spec.classes().iter().enumerate() {
                for (s, r) in run.snapshots.iter().zip(&reference.snapshots) {
                    distances.push(Distance {
                        scheme: run.config.label(),
                        reference: reference.config.label(),
                        class: class.name.clone(),
                        time: s.time,
                        relative_l1: relative_l1(&s.state, &r.state, d)?,
                    });
                }
            }
        }
    }
    let schemes = runs
        .iter()
        .map(|r| SchemeSummary {
            label: r.config.label(),
            config: r.config,
            evaluations: r.evaluations,
            steps: r.steps,
            mass_drift: r.mass_drift(n_classes),
            wall_clock: r.wall_clock.as_secs_f64(),
        })
        .collect();
    Ok(ComparisonReport { schemes, distances })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_distance_is_zero() {
        let sc = Scenario::riemann();
        let cfg = SchemeConfig::new(Scheme::Remap).with_cells(40);
        let a = simulate(&sc, &cfg, Some(0.002), None).unwrap();
        let b = simulate(&sc, &cfg, Some(0.002), None).unwrap();
        let report = compare(&sc, &[a, b]).unwrap();
        assert!(report.distances.iter().all(|d| d.relative_l1 == 0.0));
        assert_eq!(report.distances.len(), 2 * 2);
    }

    #[test]
    fn relative_l1_on_different_meshes() {
        let a = GridState::uniform(10.0, 10, &[2.0]).unwrap();
        let b = GridState::uniform(10.0, 20, &[1.0]).unwrap();
        assert!((relative_l1(&a, &b, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lagrange_runs_bin_onto_grid() {
        let sc = Scenario::riemann();
        let cfg = SchemeConfig::new(Scheme::Lagrange).with_cells(100);
        let sim = simulate(&sc, &cfg, Some(0.002), None).unwrap();
        let last = &sim.snapshots.last().unwrap().state;
        assert_eq!(last.n_cells(), 100);
        assert!((last.class_mass(1) - 475.0).abs() < 1e-9);
        assert_eq!(sim.mass_drift(2), vec![0.0, 0.0]);
    }

    #[test]
    fn compare_needs_two_runs() {
        let sc = Scenario::riemann();
        let sim = simulate(&sc, &SchemeConfig::new(Scheme::Remap).with_cells(20), Some(0.0), None).unwrap();
        assert!(compare(&sc, &[sim]).is_err());
    }
}
