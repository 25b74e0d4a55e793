//! Numerical characteristic speeds of the implicit class flux.
//!
//! The Jacobian ∇𝔽 is estimated column by column with finite differences and
//! its spectral radius is computed exactly.

use nalgebra::DMatrix;

use super::{solve_split, EquilibriumSplit, SolverSettings};
use crate::error::Result;
use crate::model::{ClassDensities, NetworkSpec};

/// Finite-difference step per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdStep {
    /// max(1e-4·ρ^d, 1e-3) veh/km.
    Relative,
    Fixed(f64),
}

impl FdStep {
    fn for_density(self, rho: f64) -> f64 {
        match self {
            FdStep::Relative => (1e-4 * rho).max(1e-3),
            FdStep::Fixed(h) => h,
        }
    }
}

fn overflows(spec: &NetworkSpec, split: &EquilibriumSplit) -> bool {
    split
        .lane_density
        .iter()
        .enumerate()
        .any(|(i, &r)| r > spec.diagram(i).jam_density())
}

/// ∇𝔽 at ρ̄ and the number of equilibrium solves spent on it.
///
/// Central differences are used where possible; a class too close to vacuum
/// uses a three-point forward formula, and a perturbation pushing some lane
/// past jam density switches to the three-point backward formula.
pub fn flux_jacobian(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    settings: &SolverSettings,
    step: FdStep,
) -> Result<(DMatrix<f64>, u64)> {
    let n = spec.n_classes();
    let mut evaluations = 0u64;
    let mut flux_at = |rho: &[f64]| -> Result<EquilibriumSplit> {
        evaluations += 1;
        let rho: Vec<f64> = rho.iter().map(|r| r.max(0.0)).collect();
        solve_split(spec, &ClassDensities::new(rho)?, settings)
    };
    let base = flux_at(rho_bar.as_slice())?;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let shifted = |d: usize, by: f64| {
        let mut r = rho_bar.as_slice().to_vec();
        r[d] += by;
        r
    };
    for d in 0..n {
        let rho = rho_bar[d];
        let h = step.for_density(rho);
        let column: Vec<f64> = if rho < h {
            let p1 = flux_at(&shifted(d, h))?;
            let p2 = flux_at(&shifted(d, 2.0 * h))?;
            (0..n)
                .map(|e| {
                    (-3.0 * base.class_flux[e] + 4.0 * p1.class_flux[e] - p2.class_flux[e])
                        / (2.0 * h)
                })
                .collect()
        } else {
            let p1 = flux_at(&shifted(d, h))?;
            if !overflows(spec, &p1) {
                let m1 = flux_at(&shifted(d, -h))?;
                (0..n)
                    .map(|e| (p1.class_flux[e] - m1.class_flux[e]) / (2.0 * h))
                    .collect()
            } else if rho >= 2.0 * h {
                let m1 = flux_at(&shifted(d, -h))?;
                let m2 = flux_at(&shifted(d, -2.0 * h))?;
                (0..n)
                    .map(|e| {
                        (3.0 * base.class_flux[e] - 4.0 * m1.class_flux[e] + m2.class_flux[e])
                            / (2.0 * h)
                    })
                    .collect()
            } else {
                let m1 = flux_at(&shifted(d, -h))?;
                (0..n)
                    .map(|e| (base.class_flux[e] - m1.class_flux[e]) / h)
                    .collect()
            }
        };
        for (e, v) in column.into_iter().enumerate() {
            jac[(e, d)] = v;
        }
    }
    Ok((jac, evaluations))
}

fn spectral_radius(jac: DMatrix<f64>) -> f64 {
    if jac.nrows() == 1 {
        return jac[(0, 0)].abs();
    }
    jac.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub(crate) fn wave_speed_counted(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    settings: &SolverSettings,
    step: FdStep,
) -> Result<(f64, u64)> {
    let (jac, evaluations) = flux_jacobian(spec, rho_bar, settings, step)?;
    let mut speed = spectral_radius(jac);
    if rho_bar.total() == 0.0 {
        speed = speed.max(spec.max_free_speed());
    }
    Ok((speed, evaluations))
}

/// Largest |eigenvalue| of ∇𝔽 at ρ̄. On the empty road the result is raised
/// to the largest lane free speed.
pub fn max_wave_speed(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    settings: &SolverSettings,
) -> Result<f64> {
    wave_speed_counted(spec, rho_bar, settings, FdStep::Relative).map(|(s, _)| s)
}

pub fn max_wave_speed_with_step(
    spec: &NetworkSpec,
    rho_bar: &ClassDensities,
    settings: &SolverSettings,
    step: f64,
) -> Result<f64> {
    wave_speed_counted(spec, rho_bar, settings, FdStep::Fixed(step)).map(|(s, _)| s)
}
