//! Per-point Logit lane-assignment equilibrium.
//!
//! Given class densities ρ̄ = (ρ^d), the partial densities ρ_i^d satisfy
//!
//! ```text
//! ρ_i^d = ρ^d · exp((V_i(ρ_i) + θ_i^d)/ν) / Σ_{j∈I^d} exp((V_j(ρ_j) + θ_j^d)/ν)
//! ```
//!
//! with ρ_i = Σ_d ρ_i^d. They are also the unique maximiser of the strictly
//! concave program evaluated by [`objective`], whose optimality conditions are
//! exactly the relation above.

mod lane_system;
mod wave_speed;

use serde::Serialize;

pub(crate) use lane_system::{softmax, ChoiceBlock, LaneSystem};
pub(crate) use wave_speed::wave_speed_counted;
pub use wave_speed::{flux_jacobian, max_wave_speed, max_wave_speed_with_step, FdStep};

use crate::error::{Error, Result};
use crate::model::{ClassDensities, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SolverMethod {
    /// Scalar bracketed Newton for one two-lane choice, vector Newton
    /// otherwise, damped Picard as fallback.
    #[default]
    Auto,
    Newton,
    Picard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    pub residual_tol: f64,
    pub max_iterations: usize,
    /// Initial Picard damping factor in (0, 1].
    pub damping: f64,
    pub method: SolverMethod,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            residual_tol: 1e-10,
            max_iterations: 200,
            damping: 0.5,
            method: SolverMethod::Auto,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > 0.0) {
            return Err(Error::invalid("solver.residual_tol", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("solver.max_iterations", "must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("solver.damping", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Equilibrium lane split at one point. Per-class tables are indexed
/// `[class][lane]` and are zero off the accessible set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumSplit {
    pub partial: Vec<Vec<f64>>,
    /// Logit shares at the equilibrium lane speeds (defined even when ρ^d = 0).
    pub shares: Vec<Vec<f64>>,
    pub lane_density: Vec<f64>,
    pub lane_speed: Vec<f64>,
    pub class_flux: Vec<f64>,
    pub class_speed: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl EquilibriumSplit {
    /// Speed of a class-`d` vehicle at this point: Σ_i s_i^d v_i.
    ///
    /// Equals q^d/ρ^d whenever ρ^d > 0 and extends it continuously to ρ^d = 0.
    pub fn marker_speed(&self, class: usize) -> f64 {
        self.shares[class]
            .iter()
            .zip(&self.lane_speed)
            .map(|(s, v)| s * v)
            .sum()
    }
}

/// Logit shares of `class` over its accessible lanes, given lane speeds.
/// The result is aligned with `spec.access(class)`.
pub fn logit_shares(spec: &NetworkSpec, lane_speeds: &[f64], class: usize) -> Vec<f64> {
    let utilities: Vec<f64> = spec
        .access(class)
        .iter()
        .map(|a| lane_speeds[a.lane] + a.theta)
        .collect();
    let mut out = vec![0.0; utilities.len()];
    softmax(&utilities, spec.nu(), &mut out);
    out
}

pub fn solve_split(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    settings: &SolverSettings,
) -> Result<EquilibriumSplit> {
    if rho_bar.len() != spec.n_classes() {
        return Err(Error::invalid(
            "rho",
            format!(
                "expected {} class densities, got {}",
                spec.n_classes(),
                rho_bar.len()
            ),
        ));
    }
    let n_lanes = spec.n_lanes();
    let mut fixed = vec![0.0; n_lanes];
    let mut blocks = Vec::new();
    let mut block_class = Vec::new();
    for (d, &mass) in rho_bar.as_slice().iter().enumerate() {
        let access = spec.access(d);
        if mass == 0.0 {
            continue;
        }
        if access.len() == 1 {
            fixed[access[0].lane] += mass;
        } else {
            blocks.push(ChoiceBlock {
                mass,
                lanes: access.iter().map(|a| a.lane).collect(),
                theta: access.iter().map(|a| a.theta).collect(),
            });
            block_class.push(d);
        }
    }
    let system = LaneSystem {
        diagrams: spec.lanes().iter().map(|l| &l.diagram).collect(),
        scale: vec![1.0; n_lanes],
        fixed,
        blocks,
        nu: spec.nu(),
    };
    let solution = system.solve(settings)?;

    let mut partial = vec![vec![0.0; n_lanes]; spec.n_classes()];
    for (d, &mass) in rho_bar.as_slice().iter().enumerate() {
        if mass > 0.0 && spec.access(d).len() == 1 {
            partial[d][spec.access(d)[0].lane] = mass;
        }
    }
    for ((b, &d), s) in system.blocks.iter().zip(&block_class).zip(&solution.shares) {
        for (&i, &si) in b.lanes.iter().zip(s) {
            partial[d][i] = b.mass * si;
        }
    }
    Ok(assemble(spec, rho_bar, partial, solution.residual, solution.iterations))
}

fn assemble(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    partial: Vec<Vec<f64>>,
    residual: f64,
    iterations: usize,
) -> EquilibriumSplit {
    let n_lanes = spec.n_lanes();
    let lane_density: Vec<f64> = (0..n_lanes)
        .map(|i| partial.iter().map(|row| row[i]).sum())
        .collect();
    let lane_speed: Vec<f64> = lane_density
        .iter()
        .enumerate()
        .map(|(i, &r)| spec.diagram(i).speed(r))
        .collect();
    let shares: Vec<Vec<f64>> = (0..spec.n_classes())
        .map(|d| {
            let mut row = vec![0.0; n_lanes];
            for (a, s) in spec.access(d).iter().zip(logit_shares(spec, &lane_speed, d)) {
                row[a.lane] = s;
            }
            row
        })
        .collect();
    let class_flux: Vec<f64> = partial
        .iter()
        .map(|row| row.iter().zip(&lane_speed).map(|(p, v)| p * v).sum())
        .collect();
    let class_speed = (0..spec.n_classes())
        .map(|d| {
            if rho_bar[d] > 0.0 {
                class_flux[d] / rho_bar[d]
            } else {
                let access = spec.access(d);
                access
                    .iter()
                    .map(|a| spec.diagram(a.lane).free_speed())
                    .sum::<f64>()
                    / access.len() as f64
            }
        })
        .collect();
    EquilibriumSplit {
        partial,
        shares,
        lane_density,
        lane_speed,
        class_flux,
        class_speed,
        residual,
        iterations,
    }
}

/// Class fluxes q^d and class mean speeds at ρ̄.
pub fn class_flux(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let split = solve_split(spec, rho_bar, settings)?;
    Ok((split.class_flux, split.class_speed))
}

/// Relative equality tolerance for the class-sum feasibility check.
const FEASIBILITY_TOL: f64 = 1e-9;

/// Concave objective whose maximiser is the equilibrium split:
///
/// ```text
/// Σ_i ∫₀^{ρ_i} V_i + Σ_{d,i∈I^d} ρ_i^d θ_i^d − ν Σ_{d,i∈I^d} ρ^d H(ρ_i^d / ρ^d),
/// H(x) = x (ln x − 1)
/// ```
///
/// The preference θ_i^d is used as the linear coefficient.
pub fn objective(
    spec: &NetworkSpec,
    partial: &[Vec<f64>],
    rho_bar: &ClassDensities,
) -> Result<f64> {
    if partial.len() != spec.n_classes() || rho_bar.len() != spec.n_classes() {
        return Err(Error::invalid("partial", "class count mismatch"));
    }
    let n_lanes = spec.n_lanes();
    let mut lane_density = vec![0.0; n_lanes];
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for (d, row) in partial.iter().enumerate() {
        if row.len() != n_lanes {
            return Err(Error::invalid(format!("partial[{d}]"), "lane count mismatch"));
        }
        let rho_d = rho_bar[d];
        let mut sum = 0.0;
        for (i, &p) in row.iter().enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::invalid(
                    format!("partial[{d}][{i}]"),
                    format!("must be finite and non-negative, got {p}"),
                ));
            }
            let Some(theta) = spec.theta(i, d) else {
                if p != 0.0 {
                    return Err(Error::invalid(
                        format!("partial[{d}][{i}]"),
                        "positive density on an inaccessible lane",
                    ));
                }
                continue;
            };
            sum += p;
            lane_density[i] += p;
            linear += p * theta;
            // H(0) = 0 by continuity
            if p > 0.0 {
                let x = p / rho_d;
                entropy += rho_d * x * (x.ln() - 1.0);
            }
        }
        if (sum - rho_d).abs() > FEASIBILITY_TOL * rho_d.max(1.0) {
            return Err(Error::invalid(
                format!("partial[{d}]"),
                format!("lane sum {sum} differs from class density {rho_d}"),
            ));
        }
    }
    let potential: f64 = lane_density
        .iter()
        .enumerate()
        .map(|(i, &r)| spec.diagram(i).speed_integral(r))
        .sum();
    Ok(potential + linear - spec.nu() * entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Access, FundamentalDiagram, Lane, UserClass};

    fn lanes(free: &[f64]) -> Vec<Lane> {
        free.iter()
            .enumerate()
            .map(|(i, &vf)| Lane {
                name: format!("lane{}", i + 1),
                diagram: FundamentalDiagram::greenshields(vf, 200.0),
            })
            .collect()
    }

    fn free_class(name: &str, n: usize) -> UserClass {
        UserClass {
            name: name.into(),
            access: (0..n).map(|lane| Access { lane, theta: 0.0 }).collect(),
        }
    }

    fn riemann_spec() -> NetworkSpec {
        NetworkSpec::new(
            lanes(&[100.0, 100.0]),
            vec![
                UserClass {
                    name: "d1".into(),
                    access: vec![Access { lane: 0, theta: 0.0 }],
                },
                free_class("d2", 2),
            ],
            12.5,
        )
        .unwrap()
    }

    fn rho(v: &[f64]) -> ClassDensities {
        ClassDensities::new(v.to_vec()).unwrap()
    }

    #[test]
    fn shares_symmetric_and_limits() {
        let spec = NetworkSpec::new(lanes(&[100.0, 100.0]), vec![free_class("d", 2)], 3.0).unwrap();
        assert_eq!(logit_shares(&spec, &[50.0, 50.0], 0), vec![0.5, 0.5]);

        let wide = spec.with_nu(1e9).unwrap();
        for s in logit_shares(&wide, &[60.0, 40.0], 0) {
            assert!((s - 0.5).abs() < 1e-6);
        }

        let tuned = spec.with_nu(12.5).unwrap();
        let s = logit_shares(&tuned, &[60.0, 40.0], 0);
        let expected = 4.8f64.exp() / (4.8f64.exp() + 3.2f64.exp());
        assert!((s[0] - expected).abs() < 1e-15);
        assert!((s[0] - 0.832).abs() < 1e-3);
        assert_eq!(s[0] + s[1], 1.0);
    }

    #[test]
    fn shares_survive_extreme_utilities() {
        let spec = NetworkSpec::new(lanes(&[100.0, 100.0]), vec![free_class("d", 2)], 1e-3).unwrap();
        let s = logit_shares(&spec, &[90.0, 10.0], 0);
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn confined_class_stays_on_its_lane() {
        let split = solve_split(&riemann_spec(), &rho(&[10.0, 5.0]), &SolverSettings::default()).unwrap();
        assert_eq!(split.partial[0], vec![10.0, 0.0]);
        assert!((split.partial[1][0] + split.partial[1][1] - 5.0).abs() < 1e-12);
        assert!(split.residual <= 1e-10);
        // class 2 prefers the emptier lane 2
        assert!(split.partial[1][1] > split.partial[1][0]);
    }

    #[test]
    fn vacuum_split() {
        let spec = riemann_spec();
        let split = solve_split(&spec, &rho(&[0.0, 0.0]), &SolverSettings::default()).unwrap();
        assert!(split.partial.iter().flatten().all(|&p| p == 0.0));
        assert_eq!(split.lane_speed, vec![100.0, 100.0]);
        assert_eq!(split.class_flux, vec![0.0, 0.0]);
        assert_eq!(split.class_speed, vec![100.0, 100.0]);
    }

    #[test]
    fn symmetric_lanes_split_evenly() {
        let spec = NetworkSpec::new(lanes(&[100.0, 100.0]), vec![free_class("d", 2)], 12.5).unwrap();
        let split = solve_split(&spec, &rho(&[50.0]), &SolverSettings::default()).unwrap();
        assert!((split.partial[0][0] - 25.0).abs() < 1e-12);
        assert!((split.partial[0][1] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn single_lane_flux_closed_form() {
        let spec = NetworkSpec::new(lanes(&[100.0]), vec![free_class("d", 1)], 12.5).unwrap();
        let (q, v) = class_flux(&spec, &rho(&[50.0]), &SolverSettings::default()).unwrap();
        assert_eq!(q, vec![3750.0]);
        assert_eq!(v, vec![75.0]);
    }

    #[test]
    fn jam_has_no_flux() {
        let spec = NetworkSpec::new(lanes(&[100.0, 100.0]), vec![free_class("d", 2)], 12.5).unwrap();
        let (q, _) = class_flux(&spec, &rho(&[400.0]), &SolverSettings::default()).unwrap();
        assert!(q.iter().all(|&x| x.abs() < 1e-9), "{q:?}");
    }

    #[test]
    fn methods_agree() {
        let spec = NetworkSpec::new(
            lanes(&[100.0, 90.0, 120.0]),
            vec![
                free_class("a", 3),
                UserClass {
                    name: "b".into(),
                    access: vec![
                        Access { lane: 1, theta: 5.0 },
                        Access { lane: 2, theta: -3.0 },
                    ],
                },
            ],
            20.0,
        )
        .unwrap();
        let r = rho(&[60.0, 35.0]);
        let mut results = Vec::new();
        for method in [SolverMethod::Auto, SolverMethod::Newton, SolverMethod::Picard] {
            let settings = SolverSettings {
                method,
                max_iterations: 2000,
                ..Default::default()
            };
            results.push(solve_split(&spec, &r, &settings).unwrap());
        }
        for other in &results[1..] {
            for (a, b) in results[0].partial.iter().flatten().zip(other.partial.iter().flatten()) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn objective_of_empty_road_is_zero() {
        let spec = riemann_spec();
        let v = objective(&spec, &[vec![0.0, 0.0], vec![0.0, 0.0]], &rho(&[0.0, 0.0])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn objective_rejects_infeasible() {
        let spec = riemann_spec();
        let r = rho(&[10.0, 5.0]);
        assert!(objective(&spec, &[vec![10.0, 0.0], vec![2.0, 2.0]], &r).is_err());
        assert!(objective(&spec, &[vec![9.0, 1.0], vec![2.0, 3.0]], &r).is_err());
        assert!(objective(&spec, &[vec![10.0, 0.0], vec![-1.0, 6.0]], &r).is_err());
        assert!(objective(&spec, &[vec![10.0, 0.0], vec![2.0, 3.0]], &r).is_ok());
    }

    #[test]
    fn symmetric_split_maximises_objective() {
        let spec = NetworkSpec::new(lanes(&[100.0, 100.0]), vec![free_class("d", 2)], 12.5).unwrap();
        let r = rho(&[50.0]);
        let at = |x: f64| objective(&spec, &[vec![x, 50.0 - x]], &r).unwrap();
        let best = at(25.0);
        for k in 0..=500 {
            let x = k as f64 * 0.1;
            if (x - 25.0).abs() > 1e-9 {
                assert!(at(x) < best, "split {x}");
            }
        }
    }

    #[test]
    fn solver_matches_grid_argmax() {
        let spec = NetworkSpec::new(lanes(&[110.0, 80.0]), vec![free_class("d", 2)], 15.0).unwrap();
        let r = rho(&[70.0]);
        let at = |x: f64| objective(&spec, &[vec![x, 70.0 - x]], &r).unwrap();
        let (mut arg, mut best) = (0.0, f64::NEG_INFINITY);
        for k in 0..=700 {
            let x = k as f64 * 0.1;
            let v = at(x);
            if v > best {
                best = v;
                arg = x;
            }
        }
        let split = solve_split(&spec, &r, &SolverSettings::default()).unwrap();
        assert!((split.partial[0][0] - arg).abs() <= 0.2, "{} vs {arg}", split.partial[0][0]);
    }

    #[test]
    fn rejects_wrong_class_count() {
        assert!(solve_split(&riemann_spec(), &rho(&[1.0]), &SolverSettings::default()).is_err());
    }

    #[test]
    fn settings_validation() {
        assert!(SolverSettings::default().validate().is_ok());
        let bad = SolverSettings {
            damping: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
