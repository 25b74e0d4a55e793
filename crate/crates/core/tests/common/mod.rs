#![allow(dead_code)]

pub mod scalar;

use logit_lanes::model::{Access, FundamentalDiagram, Lane, NetworkSpec, UserClass};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random network: 2–4 lanes with Greenshields or triangular diagrams,
/// 1–3 classes with random non-empty lane sets and preferences.
pub fn random_spec(seed: u64, nu_range: (f64, f64)) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_lanes = rng.random_range(2..=4);
    let lanes = (0..n_lanes)
        .map(|i| {
            let vmax = rng.random_range(60.0..130.0);
            let jam = rng.random_range(120.0..220.0);
            let diagram = if rng.random_bool(0.5) {
                FundamentalDiagram::greenshields(vmax, jam)
            } else {
                FundamentalDiagram::triangular(vmax, rng.random_range(0.2..0.4) * jam, jam)
            };
            Lane { name: format!("l{i}"), diagram }
        })
        .collect();
    let n_classes = rng.random_range(1..=3);
    let classes = (0..n_classes)
        .map(|d| {
            let k = rng.random_range(1..=n_lanes);
            let mut chosen = sample(&mut rng, n_lanes, k).into_vec();
            chosen.sort_unstable();
            UserClass {
                name: format!("c{d}"),
                access: chosen
                    .into_iter()
                    .map(|lane| Access { lane, theta: rng.random_range(-10.0..10.0) })
                    .collect(),
            }
        })
        .collect();
    let nu = rng.random_range(nu_range.0..=nu_range.1);
    NetworkSpec::new(lanes, classes, nu).expect("random network is valid")
}

/// Class densities keeping every lane at most `fill` of its jam density when
/// spread evenly over the accessible lanes.
pub fn random_densities(spec: &NetworkSpec, seed: u64, fill: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let min_jam = spec.lanes().iter().map(|l| l.diagram.jam_density()).fold(f64::INFINITY, f64::min);
    (0..spec.n_classes())
        .map(|d| {
            let lanes = spec.access(d).len() as f64;
            rng.random_range(0.0..=1.0) * fill * min_jam * lanes / spec.n_classes() as f64
        })
        .collect()
}

/// Simpson quadrature of V on [0, rho].
pub fn speed_integral(diagram: &FundamentalDiagram, rho: f64) -> f64 {
    let n = 2000;
    let h = rho / n as f64;
    let mut s = diagram.speed(0.0) + diagram.speed(rho);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * diagram.speed(k as f64 * h);
    }
    s * h / 3.0
}

/// Concave program whose maximiser is the equilibrium split, evaluated
/// from scratch: Σ_i ∫V_i + Σ ρ_i^d θ_i^d − ν Σ_d ρ^d H(ρ_i^d/ρ^d).
pub fn program_value(spec: &NetworkSpec, partial: &[Vec<f64>]) -> f64 {
    let mut value = 0.0;
    for i in 0..spec.n_lanes() {
        let r: f64 = partial.iter().map(|row| row[i]).sum();
        value += speed_integral(spec.diagram(i), r);
    }
    for (d, row) in partial.iter().enumerate() {
        let total: f64 = row.iter().sum();
        for a in spec.access(d) {
            let p = row[a.lane];
            value += p * a.theta;
            if p > 0.0 {
                let x = p / total;
                value -= spec.nu() * total * x * (x.ln() - 1.0);
            }
        }
    }
    value
}

/// Simpson quadrature of V on [a, b].
pub fn speed_integral_between(diagram: &FundamentalDiagram, a: f64, b: f64) -> f64 {
    let n = 2000;
    let h = (b - a) / n as f64;
    let mut s = diagram.speed(a) + diagram.speed(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * diagram.speed(a + k as f64 * h);
    }
    s * h / 3.0
}

/// `program_value(to) − program_value(from)`, term by term so a small
/// perturbation is not lost to cancellation or quadrature error.
pub fn program_change(spec: &NetworkSpec, from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let mut change = 0.0;
    for i in 0..spec.n_lanes() {
        let a: f64 = from.iter().map(|row| row[i]).sum();
        let b: f64 = to.iter().map(|row| row[i]).sum();
        if a != b {
            change += speed_integral_between(spec.diagram(i), a, b);
        }
    }
    let entropy = |p: f64, total: f64| if p > 0.0 { p * ((p / total).ln() - 1.0) } else { 0.0 };
    for d in 0..spec.n_classes() {
        let total: f64 = from[d].iter().sum();
        for a in spec.access(d) {
            let (p, q) = (from[d][a.lane], to[d][a.lane]);
            if p != q {
                change += (q - p) * a.theta - spec.nu() * (entropy(q, total) - entropy(p, total));
            }
        }
    }
    change
}

/// Largest deviation of the partials from Logit shares recomputed at the
/// lane speeds they generate, relative to max(ρ^d, 1).
pub fn logit_residual(spec: &NetworkSpec, rho: &[f64], partial: &[Vec<f64>]) -> f64 {
    let speeds: Vec<f64> = (0..spec.n_lanes())
        .map(|i| spec.diagram(i).speed(partial.iter().map(|row| row[i]).sum()))
        .collect();
    let mut worst: f64 = 0.0;
    for d in 0..spec.n_classes() {
        let access = spec.access(d);
        let weights: Vec<f64> = access.iter().map(|a| (speeds[a.lane] + a.theta) / spec.nu()).collect();
        let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = weights.iter().map(|w| (w - top).exp()).collect();
        let sum: f64 = exp.iter().sum();
        for (a, e) in access.iter().zip(&exp) {
            let expected = rho[d] * e / sum;
            worst = worst.max((partial[d][a.lane] - expected).abs() / rho[d].max(1.0));
        }
        for i in 0..spec.n_lanes() {
            if !access.iter().any(|a| a.lane == i) {
                worst = worst.max(partial[d][i].abs());
            }
        }
    }
    worst
}

/// Greenshields(100, 200) single lane, single class.
pub fn scalar_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![Lane { name: "lane".into(), diagram: FundamentalDiagram::greenshields(100.0, 200.0) }],
        vec![UserClass { name: "d".into(), access: vec![Access { lane: 0, theta: 0.0 }] }],
        12.5,
    )
    .unwrap()
}
