//! Fixed-mesh integrators on the ring: Lax-Friedrichs, Rusanov, and the
//! Euler-Lagrange remap.
//!
//! Every step first solves the lane equilibrium in each cell (independent
//! solves, run in parallel), then applies a conservative update that only
//! reads neighbour results.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::{solve_split, wave_speed_counted, EquilibriumSplit, FdStep, SolverSettings};
use crate::error::{Error, Result};
use crate::model::{ClassDensities, GridState, NetworkSpec};
use crate::scenario::Scheme;

/// Densities below this fail the run; values in `[-NEGATIVE_TOL, 0)` are
/// treated as zero when solving the equilibrium.
pub const NEGATIVE_TOL: f64 = 1e-9;

/// Slack on the CFL bound to absorb finite-difference round-off.
const CFL_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EulerScheme {
    LaxFriedrichs,
    Rusanov,
    Remap,
}

impl TryFrom<Scheme> for EulerScheme {
    type Error = Error;

    fn try_from(s: Scheme) -> Result<Self> {
        match s {
            Scheme::LaxFriedrichs => Ok(EulerScheme::LaxFriedrichs),
            Scheme::Rusanov => Ok(EulerScheme::Rusanov),
            Scheme::Remap => Ok(EulerScheme::Remap),
            Scheme::Lagrange => Err(Error::invalid(
                "run.scheme",
                "lagrange is not a fixed-mesh scheme",
            )),
        }
    }
}

/// How local wave speeds are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WaveSpeedMode {
    /// Finite-difference spectral radius at every cell state.
    Exact,
    /// Same estimate, memoised on class densities rounded to `bucket` veh/km
    /// and evaluated at the bucket centre.
    Cached { bucket: f64 },
}

impl Default for WaveSpeedMode {
    fn default() -> Self {
        WaveSpeedMode::Cached { bucket: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerRunConfig {
    pub scheme: EulerScheme,
    pub cells: usize,
    /// V_max Δt / Δx with V_max the largest lane free speed.
    pub cfl: f64,
    /// Hours.
    pub duration: f64,
    /// Hours; zero records only the initial and final states.
    pub snapshot_every: f64,
    pub solver: SolverSettings,
    pub wave_speed: WaveSpeedMode,
}

impl EulerRunConfig {
    pub fn new(scheme: EulerScheme, cells: usize, cfl: f64, duration: f64) -> Self {
        EulerRunConfig {
            scheme,
            cells,
            cfl,
            duration,
            snapshot_every: duration,
            solver: SolverSettings::default(),
            wave_speed: WaveSpeedMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells < GridState::MIN_CELLS {
            return Err(Error::invalid("run.cells", "at least 3 cells required"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::invalid("run.cfl", format!("must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::invalid("run.duration", "must be finite and non-negative"));
        }
        if !(self.snapshot_every.is_finite() && self.snapshot_every >= 0.0) {
            return Err(Error::invalid("run.snapshot_every", "must be finite and non-negative"));
        }
        if let WaveSpeedMode::Cached { bucket } = self.wave_speed {
            if !(bucket > 0.0) {
                return Err(Error::invalid("run.wave_speed", "bucket must be positive"));
            }
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub state: GridState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassRecord {
    pub time: f64,
    pub class: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub snapshots: Vec<Snapshot>,
    pub mass: Vec<MassRecord>,
    /// Equilibrium solves spent by the integrator (flux and wave speeds).
    pub evaluations: u64,
    pub steps: usize,
    pub dt: f64,
}

impl RunOutput {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("a run records at least one snapshot")
    }
}

/// Stateful stepper: owns the wave-speed cache and the evaluation counter.
pub struct EulerIntegrator<'a> {
    spec: &'a NetworkSpec,
    settings: SolverSettings,
    wave_speed: WaveSpeedMode,
    cache: HashMap<Vec<i64>, f64>,
    evaluations: u64,
    time: f64,
}

impl<'a> EulerIntegrator<'a> {
    pub fn new(spec: &'a NetworkSpec, settings: SolverSettings, wave_speed: WaveSpeedMode) -> Self {
        EulerIntegrator {
            spec,
            settings,
            wave_speed,
            cache: HashMap::new(),
            evaluations: 0,
            time: 0.0,
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    fn densities(&self, cell: &[f64]) -> Result<ClassDensities> {
        ClassDensities::new(cell.iter().map(|&r| r.max(0.0)).collect())
    }

    /// One equilibrium solve per cell.
    pub fn splits(&mut self, state: &GridState) -> Result<Vec<EquilibriumSplit>> {
        let cells: Vec<ClassDensities> = state
            .cells()
            .map(|c| self.densities(c))
            .collect::<Result<_>>()?;
        self.evaluations += cells.len() as u64;
        let (spec, settings) = (self.spec, &self.settings);
        cells
            .par_iter()
            .map(|rho| solve_split(spec, rho, settings))
            .collect()
    }

    /// Local wave speed of every cell.
    pub fn wave_speeds(&mut self, state: &GridState) -> Result<Vec<f64>> {
        let (spec, settings) = (self.spec, &self.settings);
        match self.wave_speed {
            WaveSpeedMode::Exact => {
                let cells: Vec<ClassDensities> = state
                    .cells()
                    .map(|c| self.densities(c))
                    .collect::<Result<_>>()?;
                let out: Vec<(f64, u64)> = cells
                    .par_iter()
                    .map(|rho| wave_speed_counted(spec, rho, settings, FdStep::Relative))
                    .collect::<Result<_>>()?;
                self.evaluations += out.iter().map(|(_, n)| n).sum::<u64>();
                Ok(out.into_iter().map(|(s, _)| s).collect())
            }
            WaveSpeedMode::Cached { bucket } => {
                let keys: Vec<Vec<i64>> = state
                    .cells()
                    .map(|c| c.iter().map(|&r| (r.max(0.0) / bucket).round() as i64).collect())
                    .collect();
                let missing: Vec<&Vec<i64>> = keys
                    .iter()
                    .filter(|k| !self.cache.contains_key(*k))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let fresh: Vec<(f64, u64)> = missing
                    .par_iter()
                    .map(|k| {
                        let rho = ClassDensities::new(k.iter().map(|&q| q as f64 * bucket).collect())?;
                        wave_speed_counted(spec, &rho, settings, FdStep::Relative)
                    })
                    .collect::<Result<_>>()?;
                for (k, (speed, n)) in missing.into_iter().zip(fresh) {
                    self.evaluations += n;
                    self.cache.insert(k.clone(), speed);
                }
                Ok(keys.iter().map(|k| self.cache[k]).collect())
            }
        }
    }

    fn check_cfl(&self, speeds: impl IntoIterator<Item = f64>, lambda: f64) -> Result<()> {
        let a = speeds.into_iter().fold(0.0, f64::max);
        let ratio = lambda * a;
        if ratio > 1.0 + CFL_SLACK {
            return Err(Error::Cfl {
                time: self.time,
                ratio,
            });
        }
        Ok(())
    }

    pub fn step_lax_friedrichs(&mut self, state: &GridState, dt: f64) -> Result<GridState> {
        let lambda = dt / state.dx();
        let speeds = self.wave_speeds(state)?;
        self.check_cfl(speeds, lambda)?;
        let splits = self.splits(state)?;
        let n = state.n_cells();
        let mut next = state.clone();
        for l in 0..n {
            let (lm, lp) = (state.wrap(l as isize - 1), state.wrap(l as isize + 1));
            let (left, right) = (state.cell(lm), state.cell(lp));
            for (d, out) in next.cell_mut(l).iter_mut().enumerate() {
                *out = 0.5 * (left[d] + right[d])
                    - 0.5 * lambda * (splits[lp].class_flux[d] - splits[lm].class_flux[d]);
            }
        }
        Ok(next)
    }

    pub fn step_rusanov(&mut self, state: &GridState, dt: f64) -> Result<GridState> {
        let lambda = dt / state.dx();
        let speeds = self.wave_speeds(state)?;
        self.check_cfl(speeds.iter().copied(), lambda)?;
        let n = state.n_cells();
        let interface: Vec<f64> = (0..n)
            .map(|l| speeds[l].max(speeds[state.wrap(l as isize + 1)]))
            .collect();
        self.rusanov_update(state, dt, &interface)
    }

    /// Rusanov update with a prescribed dissipation speed at every interface.
    /// With `speed = Δx/Δt` this is exactly the Lax-Friedrichs step.
    pub fn step_rusanov_with_speed(&mut self, state: &GridState, dt: f64, speed: f64) -> Result<GridState> {
        let interface = vec![speed; state.n_cells()];
        self.rusanov_update(state, dt, &interface)
    }

    fn rusanov_update(&mut self, state: &GridState, dt: f64, interface: &[f64]) -> Result<GridState> {
        let lambda = dt / state.dx();
        let splits = self.splits(state)?;
        let n = state.n_cells();
        let k = state.n_classes();
        // numerical flux through the right face of each cell
        let mut face = vec![0.0; n * k];
        for l in 0..n {
            let r = state.wrap(l as isize + 1);
            for d in 0..k {
                face[l * k + d] = 0.5 * (splits[l].class_flux[d] + splits[r].class_flux[d])
                    - 0.5 * interface[l] * (state.density(r, d) - state.density(l, d));
            }
        }
        let mut next = state.clone();
        for l in 0..n {
            let left = state.wrap(l as isize - 1);
            for (d, out) in next.cell_mut(l).iter_mut().enumerate() {
                *out -= lambda * (face[l * k + d] - face[left * k + d]);
            }
        }
        Ok(next)
    }

    /// Euler-Lagrange remap: markers at the left face of each cell move with
    /// the class speed of that cell; the stretched cells are projected back
    /// onto the fixed mesh.
    pub fn step_remap(&mut self, state: &GridState, dt: f64) -> Result<GridState> {
        let splits = self.splits(state)?;
        let n = state.n_cells();
        let h = state.dx();
        let mut next = state.clone();
        for d in 0..state.n_classes() {
            let v: Vec<f64> = (0..n)
                .map(|l| {
                    if state.density(l, d) > 0.0 {
                        splits[l].class_speed[d]
                    } else {
                        splits[l].marker_speed(d)
                    }
                })
                .collect();
            let mut compressed = vec![0.0; n];
            for l in 0..n {
                let stretched = h + dt * (v[state.wrap(l as isize + 1)] - v[l]);
                if stretched <= 0.0 {
                    return Err(Error::HeadwayCollapse {
                        cell: l,
                        class: d,
                        headway: stretched,
                    });
                }
                compressed[l] = state.density(l, d) * h / stretched;
            }
            // inflow through the left face of cell l
            let inflow: Vec<f64> = (0..n)
                .map(|l| v[l] * compressed[state.wrap(l as isize - 1)])
                .collect();
            for l in 0..n {
                let outflow = inflow[state.wrap(l as isize + 1)];
                next.cell_mut(l)[d] = state.density(l, d) + dt / h * (inflow[l] - outflow);
            }
        }
        Ok(next)
    }

    pub fn step(&mut self, scheme: EulerScheme, state: &GridState, dt: f64) -> Result<GridState> {
        match scheme {
            EulerScheme::LaxFriedrichs => self.step_lax_friedrichs(state, dt),
            EulerScheme::Rusanov => self.step_rusanov(state, dt),
            EulerScheme::Remap => self.step_remap(state, dt),
        }
    }
}

pub fn step_lax_friedrichs(spec: &NetworkSpec, state: &GridState, dt: f64) -> Result<GridState> {
    EulerIntegrator::new(spec, SolverSettings::default(), WaveSpeedMode::Exact).step_lax_friedrichs(state, dt)
}

pub fn step_rusanov(spec: &NetworkSpec, state: &GridState, dt: f64) -> Result<GridState> {
    EulerIntegrator::new(spec, SolverSettings::default(), WaveSpeedMode::Exact).step_rusanov(state, dt)
}

pub fn step_remap(spec: &NetworkSpec, state: &GridState, dt: f64) -> Result<GridState> {
    EulerIntegrator::new(spec, SolverSettings::default(), WaveSpeedMode::Exact).step_remap(state, dt)
}

/// Snapshot times in `(0, duration]`, always ending at `duration`.
pub(crate) fn snapshot_targets(duration: f64, every: f64) -> Vec<f64> {
    let mut targets = Vec::new();
    if duration <= 0.0 {
        return targets;
    }
    if every > 0.0 {
        let mut k = 1;
        loop {
            let t = k as f64 * every;
            if t >= duration * (1.0 - 1e-12) {
                break;
            }
            targets.push(t);
            k += 1;
        }
    }
    targets.push(duration);
    targets
}

fn check_positive(state: &GridState, time: f64) -> Result<()> {
    let (cell, class, value) = state.min_density();
    if value < -NEGATIVE_TOL {
        return Err(Error::Negative {
            cell,
            class,
            value,
            time,
        });
    }
    Ok(())
}

fn record_mass(state: &GridState, time: f64, out: &mut Vec<MassRecord>) {
    out.extend((0..state.n_classes()).map(|class| MassRecord {
        time,
        class,
        mass: state.class_mass(class),
    }));
}

/// Integrates with the fixed step Δt = cfl·Δx/V_max; steps are shortened only
/// to land exactly on snapshot times.
pub fn run(spec: &NetworkSpec, initial: &GridState, cfg: &EulerRunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let state0 = if initial.n_cells() == cfg.cells {
        initial.clone()
    } else {
        initial.resample(cfg.cells)?
    };
    let dt_nominal = cfg.cfl * state0.dx() / spec.max_free_speed();
    let mut integrator = EulerIntegrator::new(spec, cfg.solver, cfg.wave_speed);
    let mut snapshots = vec![Snapshot {
        time: 0.0,
        state: state0.clone(),
    }];
    let mut mass = Vec::new();
    record_mass(&state0, 0.0, &mut mass);

    let mut state = state0;
    let mut t = 0.0;
    let mut steps = 0;
    for target in snapshot_targets(cfg.duration, cfg.snapshot_every) {
        while t < target {
            let remaining = target - t;
            let (dt, lands) = if remaining <= dt_nominal * (1.0 + 1e-9) {
                (remaining, true)
            } else {
                (dt_nominal, false)
            };
            integrator.time = t;
            state = integrator.step(cfg.scheme, &state, dt)?;
            t = if lands { target } else { t + dt };
            steps += 1;
            check_positive(&state, t)?;
            record_mass(&state, t, &mut mass);
        }
        snapshots.push(Snapshot {
            time: target,
            state: state.clone(),
        });
    }
    Ok(RunOutput {
        snapshots,
        mass,
        evaluations: integrator.evaluations(),
        steps,
        dt: dt_nominal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Access, FundamentalDiagram, Lane, UserClass};
    use crate::scenario::Scenario;

    fn scalar_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![Lane {
                name: "lane".into(),
                diagram: FundamentalDiagram::greenshields(100.0, 200.0),
            }],
            vec![UserClass {
                name: "d".into(),
                access: vec![Access { lane: 0, theta: 0.0 }],
            }],
            12.5,
        )
        .unwrap()
    }

    #[test]
    fn uniform_state_is_steady() {
        let sc = Scenario::riemann();
        let g = GridState::uniform(10.0, 20, &[10.0, 40.0]).unwrap();
        let dt = 0.25 * g.dx() / 100.0;
        for scheme in [EulerScheme::LaxFriedrichs, EulerScheme::Rusanov, EulerScheme::Remap] {
            let mut it = EulerIntegrator::new(&sc.spec, SolverSettings::default(), WaveSpeedMode::Exact);
            let next = it.step(scheme, &g, dt).unwrap();
            for (a, b) in next.cells().flatten().zip(g.cells().flatten()) {
                assert!((a - b).abs() < 1e-12, "{scheme:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rusanov_with_grid_speed_is_lax_friedrichs() {
        let sc = Scenario::riemann();
        let g = sc.initial_grid(40).unwrap();
        let dt = 0.5 * g.dx() / 100.0;
        let mut it = EulerIntegrator::new(&sc.spec, SolverSettings::default(), WaveSpeedMode::Exact);
        let lf = it.step_lax_friedrichs(&g, dt).unwrap();
        let rs = it.step_rusanov_with_speed(&g, dt, g.dx() / dt).unwrap();
        for (a, b) in lf.cells().flatten().zip(rs.cells().flatten()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn remap_conserves_sine_profile() {
        let spec = scalar_spec();
        let g = GridState::from_fn(10.0, 50, 1, |x| {
            vec![80.0 + 40.0 * (2.0 * std::f64::consts::PI * x / 10.0).sin()]
        })
        .unwrap();
        let m0 = g.class_mass(0);
        let dt = 0.25 * g.dx() / 100.0;
        let mut it = EulerIntegrator::new(&spec, SolverSettings::default(), WaveSpeedMode::Exact);
        let mut s = g;
        for _ in 0..1000 {
            s = it.step_remap(&s, dt).unwrap();
        }
        assert!((s.class_mass(0) - m0).abs() < 1e-12 * m0.max(1.0) * 10.0);
        assert_eq!(it.evaluations(), 50 * 1000);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let spec = scalar_spec();
        let g = GridState::uniform(10.0, 10, &[10.0]).unwrap();
        let dt = 2.0 * g.dx() / 100.0;
        let err = step_lax_friedrichs(&spec, &g, dt).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }), "{err}");
    }

    #[test]
    fn headway_collapse_is_reported() {
        let spec = scalar_spec();
        // free flow behind a jam: the marker behind the jam catches up
        let g = GridState::from_fn(1.0, 10, 1, |x| vec![if x < 0.5 { 0.0 } else { 200.0 }]).unwrap();
        let dt = 2.0 * g.dx() / 100.0;
        let err = step_remap(&spec, &g, dt).unwrap_err();
        assert!(matches!(err, Error::HeadwayCollapse { .. }), "{err}");
    }

    #[test]
    fn zero_duration_keeps_initial_state() {
        let sc = Scenario::riemann();
        let g = sc.initial_grid(40).unwrap();
        let out = run(&sc.spec, &g, &EulerRunConfig::new(EulerScheme::Remap, 40, 0.25, 0.0)).unwrap();
        assert_eq!(out.snapshots.len(), 1);
        assert_eq!(out.snapshots[0].state, g);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn snapshots_land_on_requested_times() {
        assert_eq!(snapshot_targets(1.0, 0.25), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(snapshot_targets(1.0, 0.0), vec![1.0]);
        assert_eq!(snapshot_targets(1.0, 0.3).len(), 4);
        assert!(snapshot_targets(0.0, 0.1).is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let sc = Scenario::riemann();
        let g = sc.initial_grid(40).unwrap();
        let mut cfg = EulerRunConfig::new(EulerScheme::Rusanov, 40, 0.5, 0.005);
        cfg.snapshot_every = 0.002;
        let a = run(&sc.spec, &g, &cfg).unwrap();
        let b = run(&sc.spec, &g, &cfg).unwrap();
        assert_eq!(a, b);
        let times: Vec<f64> = a.snapshots.iter().map(|s| s.time).collect();
        assert_eq!(times, vec![0.0, 0.002, 0.004, 0.005]);
    }
}
