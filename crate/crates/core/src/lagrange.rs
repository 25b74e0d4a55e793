//! Vehicle-group (Lagrangian) integrator.
//!
//! Each group carries `size` vehicles of one class at a position on the ring
//! and splits them over its lanes with coefficients φ. The lane densities a
//! group sees come from the spacing of the groups around it; see
//! [`HeadwayRule`]. Group sizes never change, so vehicle counts are conserved
//! exactly.

use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::{solve_split, ChoiceBlock, LaneSystem, SolverSettings};
use crate::error::{Error, Result};
use crate::euler::{snapshot_targets, MassRecord};
use crate::model::{ClassDensities, GridState, NetworkSpec};

/// A group counts as present on a lane when its coefficient exceeds this.
pub const PHI_MIN: f64 = 1e-6;

/// Groups closer than this are treated as co-located and never lead each other.
const COLOCATED: f64 = 1e-12;

/// Remainders below this many vehicles are merged into the previous group.
const REMAINDER_MIN: f64 = 1e-9;

/// How a group measures the lane densities it drives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum HeadwayRule {
    /// Own vehicles spread up to the next group of the same class, plus the
    /// densities other classes' groups spread over the same point.
    #[default]
    ClassInterval,
    /// Own vehicles spread up to the nearest downstream group of any class
    /// present on the lane; other classes are not counted.
    AnyClass,
}

/// Lane densities seen by one group: `fixed_i + size · φ_i · scale_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneEnvironment {
    pub scale: Vec<f64>,
    pub fixed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleGroup {
    /// Stable identifier, preserved through reordering.
    pub id: usize,
    pub class: usize,
    pub size: f64,
    /// km, in `[0, ring_length)`.
    pub position: f64,
    /// Indexed by lane; zero off the accessible set, sums to one.
    pub phi: Vec<f64>,
}

/// Groups on a ring, kept sorted by position (stable for ties).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    ring_length: f64,
    groups: Vec<VehicleGroup>,
}

impl GroupState {
    pub fn new(spec: &NetworkSpec, ring_length: f64, mut groups: Vec<VehicleGroup>) -> Result<Self> {
        if !(ring_length.is_finite() && ring_length > 0.0) {
            return Err(Error::invalid("groups.ring_length", "must be positive and finite"));
        }
        for (k, g) in groups.iter_mut().enumerate() {
            let loc = format!("groups[{k}]");
            if g.class >= spec.n_classes() {
                return Err(Error::invalid(loc, format!("unknown class {}", g.class)));
            }
            if !(g.size.is_finite() && g.size > 0.0) {
                return Err(Error::invalid(loc, "size must be positive"));
            }
            if !g.position.is_finite() {
                return Err(Error::invalid(loc, "position must be finite"));
            }
            if g.phi.len() != spec.n_lanes() {
                return Err(Error::invalid(loc, "phi needs one entry per lane"));
            }
            let allowed: Vec<usize> = spec.access(g.class).iter().map(|a| a.lane).collect();
            let bad = g
                .phi
                .iter()
                .enumerate()
                .any(|(i, &p)| p < 0.0 || !p.is_finite() || (p > 0.0 && !allowed.contains(&i)));
            if bad || (g.phi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(loc, "phi must lie on the simplex of accessible lanes"));
            }
            g.position = wrap_position(g.position, ring_length);
        }
        groups.sort_by(|a, b| a.position.total_cmp(&b.position));
        Ok(GroupState { ring_length, groups })
    }

    pub fn ring_length(&self) -> f64 {
        self.ring_length
    }

    pub fn groups(&self) -> &[VehicleGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn class_total(&self, class: usize) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.class == class)
            .map(|g| g.size)
            .sum()
    }

    fn gap(&self, from: usize, to: usize) -> f64 {
        (self.groups[to].position - self.groups[from].position).rem_euclid(self.ring_length)
    }

    /// Distance from group `n` to the next group of its own class (the ring
    /// length when it is alone).
    pub fn class_spacing(&self, n: usize) -> f64 {
        let len = self.groups.len();
        let class = self.groups[n].class;
        (1..len)
            .map(|k| (n + k) % len)
            .find(|&m| self.groups[m].class == class && self.gap(n, m) >= COLOCATED)
            .map_or(self.ring_length, |m| self.gap(n, m))
    }
}

fn wrap_position(x: f64, ring_length: f64) -> f64 {
    let w = x.rem_euclid(ring_length);
    // rem_euclid can round up to the modulus itself
    if w >= ring_length {
        0.0
    } else {
        w
    }
}

/// Per-lane distance from group `n` to the nearest downstream group of any
/// class present on that lane; the ring length when there is none.
pub fn leader_headways(state: &GroupState, n: usize) -> Vec<f64> {
    let len = state.groups.len();
    let n_lanes = state.groups[n].phi.len();
    (0..n_lanes)
        .map(|i| {
            (1..len)
                .map(|k| (n + k) % len)
                .find(|&m| state.groups[m].phi[i] > PHI_MIN && state.gap(n, m) >= COLOCATED)
                .map_or(state.ring_length, |m| state.gap(n, m))
        })
        .collect()
}

/// Split coefficients of `group` given its lane headways: the fixed point of
/// the Logit shares at lane densities `size · φ_i / headway_i`.
pub fn solve_phi(
    spec: &NetworkSpec,
    group: &VehicleGroup,
    headways: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    solve_phi_residual(spec, group, headways, settings).map(|(phi, _)| phi)
}

pub(crate) fn solve_phi_residual(
    spec: &NetworkSpec,
    group: &VehicleGroup,
    headways: &[f64],
    settings: &SolverSettings,
) -> Result<(Vec<f64>, f64)> {
    if let Some(i) = headways.iter().position(|&h| !(h > 0.0)) {
        return Err(Error::invalid(
            format!("group {}", group.id),
            format!("headway on lane {i} must be positive"),
        ));
    }
    let env = LaneEnvironment {
        scale: headways.iter().map(|h| 1.0 / h).collect(),
        fixed: vec![0.0; spec.n_lanes()],
    };
    solve_phi_in(spec, group, &env, settings)
}

/// φ for a group in the given lane environment.
pub fn solve_phi_in(
    spec: &NetworkSpec,
    group: &VehicleGroup,
    env: &LaneEnvironment,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, f64)> {
    let access = spec.access(group.class);
    let mut phi = vec![0.0; spec.n_lanes()];
    if access.len() == 1 {
        phi[access[0].lane] = 1.0;
        return Ok((phi, 0.0));
    }
    let system = LaneSystem {
        diagrams: spec.lanes().iter().map(|l| &l.diagram).collect(),
        scale: env.scale.clone(),
        fixed: env.fixed.clone(),
        blocks: vec![ChoiceBlock {
            mass: group.size,
            lanes: access.iter().map(|a| a.lane).collect(),
            theta: access.iter().map(|a| a.theta).collect(),
        }],
        nu: spec.nu(),
    };
    let solution = system.solve(settings)?;
    for (a, &s) in access.iter().zip(&solution.shares[0]) {
        phi[a.lane] = s;
    }
    Ok((phi, solution.residual))
}

/// Lane environment of every group under `rule`, from the current positions
/// and coefficients.
pub fn lane_environments(state: &GroupState, rule: HeadwayRule) -> Vec<LaneEnvironment> {
    let n_lanes = state.groups.first().map_or(0, |g| g.phi.len());
    match rule {
        HeadwayRule::AnyClass => (0..state.len())
            .map(|n| LaneEnvironment {
                scale: leader_headways(state, n).iter().map(|h| 1.0 / h).collect(),
                fixed: vec![0.0; n_lanes],
            })
            .collect(),
        HeadwayRule::ClassInterval => {
            let spacing: Vec<f64> = (0..state.len()).map(|n| state.class_spacing(n)).collect();
            let n_classes = state.groups.iter().map(|g| g.class + 1).max().unwrap_or(0);
            // per class, indices into the sorted group list
            let members: Vec<Vec<usize>> = (0..n_classes)
                .map(|c| (0..state.len()).filter(|&n| state.groups[n].class == c).collect())
                .collect();
            (0..state.len())
                .map(|n| {
                    let g = &state.groups[n];
                    let mut fixed = vec![0.0; n_lanes];
                    for (c, idx) in members.iter().enumerate() {
                        if c == g.class || idx.is_empty() {
                            continue;
                        }
                        // last class-c group at or behind x_n, cyclically
                        let k = idx.partition_point(|&m| state.groups[m].position <= g.position);
                        let m = idx[(k + idx.len() - 1) % idx.len()];
                        let behind = (g.position - state.groups[m].position).rem_euclid(state.ring_length);
                        if behind < spacing[m] {
                            let lead = &state.groups[m];
                            for (f, p) in fixed.iter_mut().zip(&lead.phi) {
                                *f += lead.size * p / spacing[m];
                            }
                        }
                    }
                    LaneEnvironment {
                        scale: vec![1.0 / spacing[n]; n_lanes],
                        fixed,
                    }
                })
                .collect()
        }
    }
}

/// Convex-combination speed of a group and its per-lane speeds.
pub fn group_speed(spec: &NetworkSpec, group: &VehicleGroup, env: &LaneEnvironment) -> (Vec<f64>, f64) {
    let lane_speed: Vec<f64> = (0..spec.n_lanes())
        .map(|i| {
            spec.diagram(i)
                .speed(env.fixed[i] + group.size * group.phi[i] * env.scale[i])
        })
        .collect();
    let v = group.phi.iter().zip(&lane_speed).map(|(p, v)| p * v).sum();
    (lane_speed, v)
}

/// Recomputes every φ from a frozen snapshot and returns the group speeds.
pub fn refresh(
    spec: &NetworkSpec,
    state: &mut GroupState,
    rule: HeadwayRule,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let envs = lane_environments(state, rule);
    let phis: Vec<Vec<f64>> = state
        .groups
        .par_iter()
        .zip(&envs)
        .map(|(g, env)| solve_phi_in(spec, g, env, settings).map(|(phi, _)| phi))
        .collect::<Result<_>>()?;
    for (g, phi) in state.groups.iter_mut().zip(phis) {
        g.phi = phi;
    }
    Ok(state
        .groups
        .iter()
        .zip(&envs)
        .map(|(g, env)| group_speed(spec, g, env).1)
        .collect())
}

fn advance(state: &mut GroupState, speeds: &[f64], dt: f64) {
    let l = state.ring_length;
    for (g, v) in state.groups.iter_mut().zip(speeds) {
        g.position = wrap_position(g.position + dt * v, l);
    }
    state.groups.sort_by(|a, b| a.position.total_cmp(&b.position));
}

/// One step: solve φ for every group, move each group with its speed, re-sort.
pub fn step_lagrange(
    spec: &NetworkSpec,
    state: &GroupState,
    dt: f64,
    rule: HeadwayRule,
    settings: &SolverSettings,
) -> Result<GroupState> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", "must be finite and non-negative"));
    }
    let mut next = state.clone();
    let speeds = refresh(spec, &mut next, rule, settings)?;
    advance(&mut next, &speeds, dt);
    Ok(next)
}

/// Splits each class profile into groups of `group_size` vehicles placed at
/// the rear of their mass interval; the remainder forms a smaller last group.
/// φ starts at the grid equilibrium shares of the containing cell.
pub fn groups_from_grid(
    spec: &NetworkSpec,
    grid: &GridState,
    group_size: f64,
    settings: &SolverSettings,
) -> Result<GroupState> {
    if !(group_size.is_finite() && group_size > 0.0) {
        return Err(Error::invalid("run.group_size", "must be positive"));
    }
    if grid.n_classes() != spec.n_classes() {
        return Err(Error::invalid("grid", "class count does not match the network"));
    }
    let dx = grid.dx();
    let mut groups = Vec::new();
    for class in 0..spec.n_classes() {
        let profile = grid.class_profile(class);
        let total: f64 = profile.iter().map(|r| r * dx).sum();
        let mut sizes = Vec::new();
        let mut placed = 0.0;
        while total - placed > REMAINDER_MIN {
            let size = group_size.min(total - placed);
            if total - placed - size <= REMAINDER_MIN {
                sizes.push(total - placed);
                break;
            }
            sizes.push(size);
            placed += size;
        }
        let mut cumulative = 0.0;
        let mut cell = 0;
        let mut before = 0.0;
        for size in sizes {
            // rear of this group: the point where `cumulative` vehicles lie behind
            while cell < profile.len() && before + profile[cell] * dx <= cumulative {
                before += profile[cell] * dx;
                cell += 1;
            }
            let cell_at = cell.min(profile.len() - 1);
            let x = if profile[cell_at] > 0.0 {
                cell_at as f64 * dx + (cumulative - before) / profile[cell_at]
            } else {
                cell_at as f64 * dx
            };
            groups.push((class, size, x.min(grid.ring_length()), cell_at));
            cumulative += size;
        }
    }
    let cells: Vec<usize> = {
        let mut c: Vec<usize> = groups.iter().map(|g| g.3).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let splits = cells
        .par_iter()
        .map(|&c| {
            let rho = ClassDensities::new(grid.cell(c).iter().map(|r| r.max(0.0)).collect())?;
            solve_split(spec, &rho, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = groups
        .into_iter()
        .enumerate()
        .map(|(id, (class, size, position, c))| {
            let split = &splits[cells.binary_search(&c).expect("cell was collected")];
            VehicleGroup {
                id,
                class,
                size,
                position,
                phi: split.shares[class].clone(),
            }
        })
        .collect();
    GroupState::new(spec, grid.ring_length(), groups)
}

/// Spreads each group uniformly between its position and the next group of
/// its class and averages over the cells. Mass is preserved to round-off.
pub fn groups_to_grid(state: &GroupState, n_classes: usize, cells: usize) -> Result<GridState> {
    let l = state.ring_length;
    let mut data = vec![0.0; cells * n_classes];
    let dx = l / cells as f64;
    for n in 0..state.len() {
        let g = &state.groups[n];
        if g.class >= n_classes {
            return Err(Error::invalid("groups", format!("class {} out of range", g.class)));
        }
        let span = state.class_spacing(n);
        deposit(&mut data, n_classes, g.class, dx, cells, g.position, span, g.size);
    }
    GridState::new(l, n_classes, data)
}

#[allow(clippy::too_many_arguments)]
fn deposit(data: &mut [f64], k: usize, class: usize, dx: f64, cells: usize, start: f64, span: f64, mass: f64) {
    let density = mass / span;
    let mut x = start;
    let mut left = span;
    let mut cell = ((start / dx).floor() as usize).min(cells - 1);
    while left > 0.0 {
        let cell_end = (cell + 1) as f64 * dx;
        let piece = (cell_end - x).min(left).max(0.0);
        data[cell * k + class] += density * piece / dx;
        left -= piece;
        if left <= 1e-15 * span {
            // put any round-off residue in the current cell
            data[cell * k + class] += density * left.max(0.0) / dx;
            break;
        }
        cell = (cell + 1) % cells;
        x = cell as f64 * dx;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagrangeRunConfig {
    pub group_size: f64,
    /// Step as a fraction of the smallest initial same-class spacing
    /// travelled at the largest free speed.
    pub cfl: f64,
    pub duration: f64,
    pub snapshot_every: f64,
    pub rule: HeadwayRule,
    pub solver: SolverSettings,
}

impl LagrangeRunConfig {
    pub fn new(group_size: f64, duration: f64) -> Self {
        LagrangeRunConfig {
            group_size,
            cfl: 0.25,
            duration,
            snapshot_every: duration,
            rule: HeadwayRule::default(),
            solver: SolverSettings::default(),
        }
    }
}

/// A row of the group trajectory table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRecord {
    pub time: f64,
    pub id: usize,
    pub class: usize,
    pub position: f64,
    pub phi: Vec<f64>,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSnapshot {
    pub time: f64,
    pub state: GroupState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeOutput {
    pub snapshots: Vec<GroupSnapshot>,
    pub mass: Vec<MassRecord>,
    pub trajectory: Vec<GroupRecord>,
    /// φ solves performed.
    pub evaluations: u64,
    pub steps: usize,
    pub dt: f64,
}

impl LagrangeOutput {
    pub fn last(&self) -> &GroupSnapshot {
        self.snapshots.last().expect("a run records at least one snapshot")
    }
}

fn record(state: &GroupState, speeds: &[f64], time: f64, out: &mut Vec<GroupRecord>) {
    let mut rows: Vec<GroupRecord> = state
        .groups
        .iter()
        .zip(speeds)
        .map(|(g, &speed)| GroupRecord {
            time,
            id: g.id,
            class: g.class,
            position: g.position,
            phi: g.phi.clone(),
            speed,
        })
        .collect();
    rows.sort_by_key(|r| r.id);
    out.extend(rows);
}

fn record_mass(spec: &NetworkSpec, state: &GroupState, time: f64, out: &mut Vec<MassRecord>) {
    out.extend((0..spec.n_classes()).map(|class| MassRecord {
        time,
        class,
        mass: state.class_total(class),
    }));
}

pub fn run(spec: &NetworkSpec, initial: &GridState, cfg: &LagrangeRunConfig) -> Result<LagrangeOutput> {
    if !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(Error::invalid("run.cfl", format!("must lie in (0, 1], got {}", cfg.cfl)));
    }
    if !(cfg.duration.is_finite() && cfg.duration >= 0.0) {
        return Err(Error::invalid("run.duration", "must be finite and non-negative"));
    }
    cfg.solver.validate()?;
    let mut state = groups_from_grid(spec, initial, cfg.group_size, &cfg.solver)?;
    let spacing = (0..state.len())
        .map(|n| state.class_spacing(n))
        .fold(state.ring_length, f64::min);
    let dt_nominal = cfg.cfl * spacing / spec.max_free_speed();

    let mut evaluations = 0u64;
    let mut trajectory = Vec::new();
    let mut mass = Vec::new();
    let mut speeds = refresh(spec, &mut state, cfg.rule, &cfg.solver)?;
    evaluations += state.len() as u64;
    record(&state, &speeds, 0.0, &mut trajectory);
    record_mass(spec, &state, 0.0, &mut mass);
    let mut snapshots = vec![GroupSnapshot {
        time: 0.0,
        state: state.clone(),
    }];

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
            advance(&mut state, &speeds, dt);
            t = if lands { target } else { t + dt };
            steps += 1;
            speeds = refresh(spec, &mut state, cfg.rule, &cfg.solver)?;
            evaluations += state.len() as u64;
            record(&state, &speeds, t, &mut trajectory);
            record_mass(spec, &state, t, &mut mass);
        }
        snapshots.push(GroupSnapshot {
            time: target,
            state: state.clone(),
        });
    }
    Ok(LagrangeOutput {
        snapshots,
        mass,
        trajectory,
        evaluations,
        steps,
        dt: dt_nominal,
    })
}
