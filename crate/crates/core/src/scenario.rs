//! Scenario files: network, piecewise-constant initial data, and run settings.
//!
//! ```json
//! {
//!   "network": {
//!     "nu": 12.5,
//!     "lanes": [{ "name": "lane1", "diagram": { "kind": "greenshields", "free_speed": 100, "jam_density": 200 } }],
//!     "classes": [{ "name": "d1", "lanes": [{ "lane": "lane1", "theta": 0 }] }]
//!   },
//!   "initial": {
//!     "ring_length": 10,
//!     "segments": [{ "from": 0, "to": 10, "rho": { "d1": 20 } }]
//!   },
//!   "run": { "scheme": "remap", "cells": 400, "cfl": 0.25, "duration": 0.0333 }
//! }
//! ```
//!
//! Ring positions not covered by a segment start empty. Classes missing from a
//! segment's `rho` map have zero density there.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::equilibrium::SolverSettings;
use crate::error::{Error, Result};
use crate::model::{Access, FundamentalDiagram, GridState, Lane, NetworkSpec, UserClass};

/// The bundled two-lane, two-class ring-road Riemann problem.
pub const RIEMANN_JSON: &str = include_str!("../scenarios/riemann.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub network: NetworkSection,
    pub initial: InitialSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub nu: f64,
    pub lanes: Vec<LaneEntry>,
    pub classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneEntry {
    pub name: String,
    pub diagram: FundamentalDiagram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub lanes: Vec<AccessEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessEntry {
    pub lane: String,
    #[serde(default)]
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub ring_length: f64,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub from: f64,
    pub to: f64,
    pub rho: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<f64>,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LaxFriedrichs,
    Rusanov,
    Remap,
    Lagrange,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::LaxFriedrichs,
        Scheme::Rusanov,
        Scheme::Remap,
        Scheme::Lagrange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::LaxFriedrichs => "lax-friedrichs",
            Scheme::Rusanov => "rusanov",
            Scheme::Remap => "remap",
            Scheme::Lagrange => "lagrange",
        }
    }

    /// Cell count and CFL number reported as converged for the Riemann problem.
    pub fn default_resolution(self) -> (usize, f64) {
        match self {
            Scheme::LaxFriedrichs => (1600, 1.0),
            Scheme::Rusanov => (800, 0.5),
            Scheme::Remap => (400, 0.25),
            Scheme::Lagrange => (400, 0.25),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "lax-friedrichs" | "lf" => Ok(Scheme::LaxFriedrichs),
            "rusanov" => Ok(Scheme::Rusanov),
            "remap" | "euler-lagrange-remap" => Ok(Scheme::Remap),
            "lagrange" | "lagrangian" => Ok(Scheme::Lagrange),
            _ => Err(Error::UnknownScheme {
                name: s.to_string(),
                valid: Scheme::ALL.map(Scheme::name).join(", "),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub from: f64,
    pub to: f64,
    /// Density per class index.
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub ring_length: f64,
    pub segments: Vec<Segment>,
}

impl InitialCondition {
    /// Exact cell averages of the piecewise-constant data.
    pub fn to_grid(&self, cells: usize, n_classes: usize) -> Result<GridState> {
        let dx = self.ring_length / cells as f64;
        let mut data = vec![0.0; cells * n_classes];
        for seg in &self.segments {
            let first = ((seg.from / dx).floor() as usize).min(cells - 1);
            let last = ((seg.to / dx).ceil() as usize).min(cells);
            for l in first..last {
                let (a, b) = (l as f64 * dx, (l + 1) as f64 * dx);
                let overlap = b.min(seg.to) - a.max(seg.from);
                if overlap > 0.0 {
                    for (d, r) in seg.rho.iter().enumerate() {
                        data[l * n_classes + d] += r * overlap / dx;
                    }
                }
            }
        }
        GridState::new(self.ring_length, n_classes, data)
    }

    /// Vehicles of class `d` on the ring.
    pub fn class_total(&self, class: usize) -> f64 {
        self.segments
            .iter()
            .map(|s| s.rho[class] * (s.to - s.from))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunParameters {
    pub scheme: Scheme,
    pub cells: usize,
    pub cfl: f64,
    pub group_size: f64,
    /// Hours.
    pub duration: f64,
    pub snapshot_every: f64,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: NetworkSpec,
    pub initial: InitialCondition,
    pub run: RunParameters,
    pub file: ScenarioFile,
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::invalid(path.display().to_string(), format!("cannot read scenario: {e}"))
    })?;
    Scenario::from_json(&text)
}

impl Scenario {
    pub fn riemann() -> Scenario {
        Scenario::from_json(RIEMANN_JSON).expect("bundled scenario is valid")
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        Scenario::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("scenario serializes")
    }

    pub fn from_file(file: ScenarioFile) -> Result<Scenario> {
        let spec = build_network(&file.network)?;
        let initial = build_initial(&file.initial, &spec)?;
        let run = build_run(&file.run)?;
        Ok(Scenario {
            spec,
            initial,
            run,
            file,
        })
    }

    pub fn initial_grid(&self, cells: usize) -> Result<GridState> {
        self.initial.to_grid(cells, self.spec.n_classes())
    }
}

fn build_network(net: &NetworkSection) -> Result<NetworkSpec> {
    let mut lane_index = BTreeMap::new();
    let mut lanes = Vec::with_capacity(net.lanes.len());
    for (i, entry) in net.lanes.iter().enumerate() {
        if lane_index.insert(entry.name.as_str(), i).is_some() {
            return Err(Error::invalid(
                format!("network.lanes[{i}].name"),
                format!("duplicate lane name `{}`", entry.name),
            ));
        }
        lanes.push(Lane {
            name: entry.name.clone(),
            diagram: entry.diagram,
        });
    }
    let mut class_names = BTreeMap::new();
    let mut classes = Vec::with_capacity(net.classes.len());
    for (d, entry) in net.classes.iter().enumerate() {
        if class_names.insert(entry.name.as_str(), d).is_some() {
            return Err(Error::invalid(
                format!("network.classes[{d}].name"),
                format!("duplicate class name `{}`", entry.name),
            ));
        }
        let access = entry
            .lanes
            .iter()
            .enumerate()
            .map(|(k, a)| {
                lane_index
                    .get(a.lane.as_str())
                    .map(|&lane| Access {
                        lane,
                        theta: a.theta,
                    })
                    .ok_or_else(|| {
                        Error::invalid(
                            format!("network.classes[{d}].lanes[{k}].lane"),
                            format!("unknown lane `{}`", a.lane),
                        )
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        classes.push(UserClass {
            name: entry.name.clone(),
            access,
        });
    }
    NetworkSpec::new(lanes, classes, net.nu)
}

fn build_initial(init: &InitialSection, spec: &NetworkSpec) -> Result<InitialCondition> {
    let length = init.ring_length;
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::invalid(
            "initial.ring_length",
            format!("must be finite and positive, got {length}"),
        ));
    }
    let mut segments = Vec::with_capacity(init.segments.len());
    for (k, seg) in init.segments.iter().enumerate() {
        let loc = format!("initial.segments[{k}]");
        if !(seg.from >= 0.0 && seg.from < seg.to && seg.to <= length) {
            return Err(Error::invalid(
                loc,
                format!(
                    "interval [{}, {}) must satisfy 0 <= from < to <= ring_length ({length})",
                    seg.from, seg.to
                ),
            ));
        }
        let mut rho = vec![0.0; spec.n_classes()];
        for (name, &value) in &seg.rho {
            let Some(d) = spec.classes().iter().position(|c| &c.name == name) else {
                return Err(Error::invalid(
                    format!("{loc}.rho"),
                    format!("unknown class `{name}`"),
                ));
            };
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::invalid(
                    format!("{loc}.rho.{name}"),
                    format!("density must be finite and non-negative, got {value}"),
                ));
            }
            rho[d] = value;
        }
        segments.push(Segment {
            from: seg.from,
            to: seg.to,
            rho,
        });
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| segments[a].from.total_cmp(&segments[b].from));
    for w in order.windows(2) {
        if segments[w[1]].from < segments[w[0]].to {
            return Err(Error::invalid(
                format!("initial.segments[{}]", w[1]),
                format!("overlaps initial.segments[{}]", w[0]),
            ));
        }
    }
    Ok(InitialCondition {
        ring_length: length,
        segments,
    })
}

fn build_run(run: &RunSection) -> Result<RunParameters> {
    let scheme: Scheme = run.scheme.parse()?;
    let (default_cells, default_cfl) = scheme.default_resolution();
    let cells = run.cells.unwrap_or(default_cells);
    if cells < GridState::MIN_CELLS {
        return Err(Error::invalid(
            "run.cells",
            format!("at least {} cells required, got {cells}", GridState::MIN_CELLS),
        ));
    }
    let cfl = run.cfl.unwrap_or(default_cfl);
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::invalid("run.cfl", format!("must lie in (0, 1], got {cfl}")));
    }
    let group_size = run.group_size.unwrap_or(5.0);
    if !(group_size.is_finite() && group_size > 0.0) {
        return Err(Error::invalid(
            "run.group_size",
            format!("must be positive, got {group_size}"),
        ));
    }
    if !(run.duration.is_finite() && run.duration >= 0.0) {
        return Err(Error::invalid(
            "run.duration",
            format!("must be finite and non-negative, got {}", run.duration),
        ));
    }
    let snapshot_every = run.snapshot_every.unwrap_or(run.duration);
    if !(snapshot_every.is_finite() && snapshot_every >= 0.0) {
        return Err(Error::invalid(
            "run.snapshot_every",
            format!("must be finite and non-negative, got {snapshot_every}"),
        ));
    }
    let mut solver = SolverSettings::default();
    if let Some(tol) = run.residual_tol {
        solver.residual_tol = tol;
    }
    if let Some(n) = run.max_iterations {
        solver.max_iterations = n;
    }
    solver.validate()?;
    Ok(RunParameters {
        scheme,
        cells,
        cfl,
        group_size,
        duration: run.duration,
        snapshot_every,
        solver,
    })
}
