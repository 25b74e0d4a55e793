//! Independent single-lane LWR references for Greenshields(100, 200).

use logit_lanes::equilibrium::SolverSettings;
use logit_lanes::euler::{EulerIntegrator, WaveSpeedMode};
use logit_lanes::lagrange::{self, GroupState, HeadwayRule, VehicleGroup};
use logit_lanes::model::GridState;

use super::scalar_spec;

pub const VMAX: f64 = 100.0;
pub const JAM: f64 = 200.0;

pub fn v(rho: f64) -> f64 {
    VMAX * (1.0 - rho / JAM)
}

pub fn f(rho: f64) -> f64 {
    rho * v(rho)
}

pub fn df(rho: f64) -> f64 {
    VMAX * (1.0 - 2.0 * rho / JAM)
}

pub fn smooth_profile(cells: usize) -> Vec<f64> {
    (0..cells)
        .map(|l| {
            let x = (l as f64 + 0.5) / cells as f64;
            90.0 + 60.0 * (2.0 * std::f64::consts::PI * x).sin() + 20.0 * (6.0 * std::f64::consts::PI * x).cos()
        })
        .collect()
}

pub fn lax_friedrichs_ref(rho: &[f64], lambda: f64) -> Vec<f64> {
    let n = rho.len();
    (0..n)
        .map(|l| {
            let (a, b) = (rho[(l + n - 1) % n], rho[(l + 1) % n]);
            0.5 * (a + b) - 0.5 * lambda * (f(b) - f(a))
        })
        .collect()
}

pub fn rusanov_ref(rho: &[f64], lambda: f64) -> Vec<f64> {
    let n = rho.len();
    let face: Vec<f64> = (0..n)
        .map(|l| {
            let (a, b) = (rho[l], rho[(l + 1) % n]);
            let s = df(a).abs().max(df(b).abs());
            0.5 * (f(a) + f(b)) - 0.5 * s * (b - a)
        })
        .collect();
    (0..n).map(|l| rho[l] - lambda * (face[l] - face[(l + n - 1) % n])).collect()
}

pub fn remap_ref(rho: &[f64], dt: f64, h: f64) -> Vec<f64> {
    let n = rho.len();
    let speed: Vec<f64> = rho.iter().map(|&r| v(r)).collect();
    let stretched: Vec<f64> = (0..n).map(|l| rho[l] * h / (h + dt * (speed[(l + 1) % n] - speed[l]))).collect();
    (0..n)
        .map(|l| {
            let inflow = speed[l] * stretched[(l + n - 1) % n];
            let outflow = speed[(l + 1) % n] * stretched[l];
            rho[l] + dt / h * (inflow - outflow)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run_scalar(step: impl Fn(&mut EulerIntegrator, &GridState, f64) -> GridState, reference: impl Fn(&[f64], f64, f64) -> Vec<f64>, cfl: f64) -> f64 {
    let spec = scalar_spec();
    let cells = 100;
    let init = smooth_profile(cells);
    let mut state = GridState::new(10.0, 1, init.clone()).unwrap();
    let dt = cfl * state.dx() / VMAX;
    let mut it = EulerIntegrator::new(&spec, SolverSettings::default(), WaveSpeedMode::Exact);
    let mut r = init;
    for _ in 0..100 {
        state = step(&mut it, &state, dt);
        r = reference(&r, dt, state.dx());
    }
    max_abs_diff(&state.class_profile(0), &r) / r.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Follow-the-leader: x_n += dt · V(ΔN / (x_{n+1} − x_n)) on the ring.
pub fn follow_the_leader(x: &mut [f64], size: f64, ring: f64, dt: f64) {
    let n = x.len();
    let speeds: Vec<f64> = (0..n)
        .map(|k| {
            let gap = (x[(k + 1) % n] - x[k]).rem_euclid(ring);
            v(size / gap)
        })
        .collect();
    for (xk, s) in x.iter_mut().zip(speeds) {
        *xk = (*xk + dt * s).rem_euclid(ring);
    }
}


/// Largest position error of the library's groups against the reference
/// after 100 steps from 20 irregularly spaced groups of 5 vehicles.
pub fn lagrange_error() -> f64 {
    let spec = scalar_spec();
    let ring = 10.0;
    let size = 5.0;
    let mut x: Vec<f64> = (0..20).map(|k| k as f64 * 0.5 + 0.2 * (k as f64 * 1.3).sin()).collect();
    let groups = x
        .iter()
        .enumerate()
        .map(|(id, &position)| VehicleGroup { id, class: 0, size, position, phi: vec![1.0] })
        .collect();
    let mut state = GroupState::new(&spec, ring, groups).unwrap();
    let dt = 0.25 * 0.3 / VMAX;
    for _ in 0..100 {
        state = lagrange::step_lagrange(&spec, &state, dt, HeadwayRule::default(), &SolverSettings::default()).unwrap();
        follow_the_leader(&mut x, size, ring, dt);
    }
    state
        .groups()
        .iter()
        .map(|g| {
            let d = (g.position - x[g.id]).abs();
            d.min(ring - d)
        })
        .fold(0.0, f64::max)
}

pub fn lax_friedrichs_error() -> f64 {
    run_scalar(|it, s, dt| it.step_lax_friedrichs(s, dt).unwrap(), |r, dt, h| lax_friedrichs_ref(r, dt / h), 0.9)
}

pub fn rusanov_error() -> f64 {
    run_scalar(|it, s, dt| it.step_rusanov(s, dt).unwrap(), |r, dt, h| rusanov_ref(r, dt / h), 0.5)
}

pub fn remap_error() -> f64 {
    run_scalar(|it, s, dt| it.step_remap(s, dt).unwrap(), remap_ref, 0.25)
}
