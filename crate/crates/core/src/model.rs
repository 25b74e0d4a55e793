//! Domain types shared by every solver.
//!
//! Units are km, hours, veh/km and km/h throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed-density law of a single lane.
///
/// Densities outside `[0, jam_density]` are clamped before evaluation, so the
/// speed never leaves `[0, free_speed]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FundamentalDiagram {
    Greenshields {
        free_speed: f64,
        jam_density: f64,
    },
    Triangular {
        free_speed: f64,
        critical_density: f64,
        jam_density: f64,
    },
}

impl FundamentalDiagram {
    pub fn greenshields(free_speed: f64, jam_density: f64) -> Self {
        FundamentalDiagram::Greenshields {
            free_speed,
            jam_density,
        }
    }

    pub fn triangular(free_speed: f64, critical_density: f64, jam_density: f64) -> Self {
        FundamentalDiagram::Triangular {
            free_speed,
            critical_density,
            jam_density,
        }
    }

    pub fn free_speed(&self) -> f64 {
        match *self {
            FundamentalDiagram::Greenshields { free_speed, .. }
            | FundamentalDiagram::Triangular { free_speed, .. } => free_speed,
        }
    }

    pub fn jam_density(&self) -> f64 {
        match *self {
            FundamentalDiagram::Greenshields { jam_density, .. }
            | FundamentalDiagram::Triangular { jam_density, .. } => jam_density,
        }
    }

    pub fn validate(&self, location: &str) -> Result<()> {
        let (vf, jam) = (self.free_speed(), self.jam_density());
        if !(vf.is_finite() && vf > 0.0) {
            return Err(Error::invalid(
                format!("{location}.free_speed"),
                format!("must be finite and positive, got {vf}"),
            ));
        }
        if !(jam.is_finite() && jam > 0.0) {
            return Err(Error::invalid(
                format!("{location}.jam_density"),
                format!("must be finite and positive, got {jam}"),
            ));
        }
        if let FundamentalDiagram::Triangular {
            critical_density, ..
        } = *self
        {
            if !(critical_density > 0.0 && critical_density < jam) {
                return Err(Error::invalid(
                    format!("{location}.critical_density"),
                    format!("must lie in (0, jam_density = {jam}), got {critical_density}"),
                ));
            }
        }
        Ok(())
    }

    /// Equilibrium speed at density `rho`.
    pub fn speed(&self, rho: f64) -> f64 {
        let rho = rho.clamp(0.0, self.jam_density());
        match *self {
            FundamentalDiagram::Greenshields {
                free_speed,
                jam_density,
            } => free_speed * (1.0 - rho / jam_density),
            FundamentalDiagram::Triangular {
                free_speed,
                critical_density,
                jam_density,
            } => {
                if rho <= critical_density {
                    free_speed
                } else {
                    free_speed * critical_density * (jam_density - rho)
                        / (rho * (jam_density - critical_density))
                }
            }
        }
    }

    /// dV/dρ. Zero outside the clamping interval; the congested branch is used
    /// at the triangular kink.
    pub fn speed_derivative(&self, rho: f64) -> f64 {
        if rho < 0.0 || rho > self.jam_density() {
            return 0.0;
        }
        match *self {
            FundamentalDiagram::Greenshields {
                free_speed,
                jam_density,
            } => -free_speed / jam_density,
            FundamentalDiagram::Triangular {
                free_speed,
                critical_density,
                jam_density,
            } => {
                if rho < critical_density {
                    0.0
                } else {
                    -free_speed * critical_density * jam_density
                        / (rho * rho * (jam_density - critical_density))
                }
            }
        }
    }

    /// Flow ρ·V(ρ).
    pub fn flow(&self, rho: f64) -> f64 {
        rho * self.speed(rho)
    }

    /// ∫₀^ρ V(r) dr, continued with the clamped speed outside `[0, jam]`.
    pub fn speed_integral(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            return self.free_speed() * rho;
        }
        let r = rho.min(self.jam_density());
        match *self {
            FundamentalDiagram::Greenshields {
                free_speed,
                jam_density,
            } => free_speed * (r - r * r / (2.0 * jam_density)),
            FundamentalDiagram::Triangular {
                free_speed,
                critical_density,
                jam_density,
            } => {
                if r <= critical_density {
                    free_speed * r
                } else {
                    let scale = free_speed * critical_density / (jam_density - critical_density);
                    free_speed * critical_density
                        + scale * (jam_density * (r / critical_density).ln() - (r - critical_density))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub name: String,
    pub diagram: FundamentalDiagram,
}

/// A lane a class may use, with the class's preference for it (km/h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Access {
    pub lane: usize,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserClass {
    pub name: String,
    pub access: Vec<Access>,
}

/// Lanes, classes, accessibility sets, preferences and the Logit sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    lanes: Vec<Lane>,
    classes: Vec<UserClass>,
    nu: f64,
}

impl NetworkSpec {
    pub fn new(lanes: Vec<Lane>, classes: Vec<UserClass>, nu: f64) -> Result<Self> {
        if lanes.is_empty() {
            return Err(Error::invalid("network.lanes", "at least one lane is required"));
        }
        if classes.is_empty() {
            return Err(Error::invalid(
                "network.classes",
                "at least one class is required",
            ));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::invalid(
                "network.nu",
                format!("sensitivity must be finite and strictly positive, got {nu}"),
            ));
        }
        for (i, lane) in lanes.iter().enumerate() {
            lane.diagram
                .validate(&format!("network.lanes[{i}].diagram"))?;
        }
        for (d, class) in classes.iter().enumerate() {
            let location = format!("network.classes[{d}].lanes");
            if class.access.is_empty() {
                return Err(Error::invalid(
                    location,
                    format!("class `{}` has no accessible lane", class.name),
                ));
            }
            let mut seen = vec![false; lanes.len()];
            for a in &class.access {
                if a.lane >= lanes.len() {
                    return Err(Error::invalid(
                        &location,
                        format!("lane index {} out of range", a.lane),
                    ));
                }
                if std::mem::replace(&mut seen[a.lane], true) {
                    return Err(Error::invalid(
                        &location,
                        format!("lane `{}` listed twice", lanes[a.lane].name),
                    ));
                }
                if !a.theta.is_finite() {
                    return Err(Error::invalid(
                        &location,
                        format!("preference for lane `{}` is not finite", lanes[a.lane].name),
                    ));
                }
            }
        }
        Ok(NetworkSpec { lanes, classes, nu })
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn classes(&self) -> &[UserClass] {
        &self.classes
    }

    pub fn n_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn diagram(&self, lane: usize) -> &FundamentalDiagram {
        &self.lanes[lane].diagram
    }

    /// The accessible set I^d with preferences.
    pub fn access(&self, class: usize) -> &[Access] {
        &self.classes[class].access
    }

    pub fn theta(&self, lane: usize, class: usize) -> Option<f64> {
        self.access(class)
            .iter()
            .find(|a| a.lane == lane)
            .map(|a| a.theta)
    }

    /// D_i: the classes allowed on `lane`.
    pub fn classes_on_lane(&self, lane: usize) -> Vec<usize> {
        (0..self.n_classes())
            .filter(|&d| self.access(d).iter().any(|a| a.lane == lane))
            .collect()
    }

    pub fn max_free_speed(&self) -> f64 {
        self.lanes
            .iter()
            .map(|l| l.diagram.free_speed())
            .fold(0.0, f64::max)
    }

    /// Same network with a different sensitivity.
    pub fn with_nu(&self, nu: f64) -> Result<Self> {
        NetworkSpec::new(self.lanes.clone(), self.classes.clone(), nu)
    }
}

/// Density per class, ρ̄ = (ρ^d).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDensities(Vec<f64>);

impl ClassDensities {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        for (d, &r) in rho.iter().enumerate() {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::invalid(
                    format!("rho[{d}]"),
                    format!("class density must be finite and non-negative, got {r}"),
                ));
            }
        }
        Ok(ClassDensities(rho))
    }

    pub fn zeros(n_classes: usize) -> Self {
        ClassDensities(vec![0.0; n_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        total_density(&self.0)
    }
}

impl std::ops::Index<usize> for ClassDensities {
    type Output = f64;
    fn index(&self, d: usize) -> &f64 {
        &self.0[d]
    }
}

pub fn total_density(rho: &[f64]) -> f64 {
    rho.iter().sum()
}

/// Class densities on a uniform periodic mesh, stored cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    ring_length: f64,
    n_classes: usize,
    data: Vec<f64>,
}

impl GridState {
    pub const MIN_CELLS: usize = 3;

    pub fn new(ring_length: f64, n_classes: usize, data: Vec<f64>) -> Result<Self> {
        if !(ring_length.is_finite() && ring_length > 0.0) {
            return Err(Error::invalid(
                "grid.ring_length",
                format!("must be positive, got {ring_length}"),
            ));
        }
        if n_classes == 0 || data.len() % n_classes != 0 {
            return Err(Error::invalid(
                "grid",
                "data length is not a multiple of the class count",
            ));
        }
        let cells = data.len() / n_classes;
        if cells < Self::MIN_CELLS {
            return Err(Error::invalid(
                "grid.cells",
                format!("at least {} cells required, got {cells}", Self::MIN_CELLS),
            ));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                format!("grid.cell[{}]", k / n_classes),
                "non-finite density",
            ));
        }
        Ok(GridState {
            ring_length,
            n_classes,
            data,
        })
    }

    pub fn uniform(ring_length: f64, cells: usize, rho: &[f64]) -> Result<Self> {
        let data = (0..cells).flat_map(|_| rho.iter().copied()).collect();
        GridState::new(ring_length, rho.len(), data)
    }

    /// Build from per-cell class densities (`f(x_center) -> ρ̄`).
    pub fn from_fn(
        ring_length: f64,
        cells: usize,
        n_classes: usize,
        mut f: impl FnMut(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let dx = ring_length / cells as f64;
        let mut data = Vec::with_capacity(cells * n_classes);
        for l in 0..cells {
            let rho = f((l as f64 + 0.5) * dx);
            assert_eq!(rho.len(), n_classes, "class count mismatch");
            data.extend(rho);
        }
        GridState::new(ring_length, n_classes, data)
    }

    pub fn ring_length(&self) -> f64 {
        self.ring_length
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_cells(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn dx(&self) -> f64 {
        self.ring_length / self.n_cells() as f64
    }

    pub fn x_center(&self, cell: usize) -> f64 {
        (cell as f64 + 0.5) * self.dx()
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.n_classes..(cell + 1) * self.n_classes]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.data[cell * self.n_classes..(cell + 1) * self.n_classes]
    }

    pub fn cells(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n_classes)
    }

    /// Periodic neighbour index.
    pub fn wrap(&self, cell: isize) -> usize {
        cell.rem_euclid(self.n_cells() as isize) as usize
    }

    pub fn density(&self, cell: usize, class: usize) -> f64 {
        self.data[cell * self.n_classes + class]
    }

    pub fn class_profile(&self, class: usize) -> Vec<f64> {
        self.cells().map(|c| c[class]).collect()
    }

    /// Σ_ℓ ρ_ℓ^d Δx.
    pub fn class_mass(&self, class: usize) -> f64 {
        self.cells().map(|c| c[class]).sum::<f64>() * self.dx()
    }

    pub fn min_density(&self) -> (usize, usize, f64) {
        let (k, v) = self
            .data
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
        (k / self.n_classes, k % self.n_classes, v)
    }

    /// Conservative projection onto a mesh with `cells` cells (overlap averages).
    pub fn resample(&self, cells: usize) -> Result<GridState> {
        if cells == self.n_cells() {
            return Ok(self.clone());
        }
        let src_dx = self.dx();
        let dst_dx = self.ring_length / cells as f64;
        let mut data = vec![0.0; cells * self.n_classes];
        for j in 0..cells {
            let (a, b) = (j as f64 * dst_dx, (j + 1) as f64 * dst_dx);
            let first = ((a / src_dx).floor() as usize).min(self.n_cells() - 1);
            let last = (((b / src_dx).ceil() as usize).max(first + 1)).min(self.n_cells());
            for l in first..last {
                let (ca, cb) = (l as f64 * src_dx, (l + 1) as f64 * src_dx);
                let overlap = cb.min(b) - ca.max(a);
                if overlap > 0.0 {
                    for d in 0..self.n_classes {
                        data[j * self.n_classes + d] += overlap * self.density(l, d) / dst_dx;
                    }
                }
            }
        }
        GridState::new(self.ring_length, self.n_classes, data)
    }
}
