//! Fixed-point system over lane densities.
//!
//! Unknowns are lane densities `r`. Each choice block `b` (a class with more
//! than one accessible lane) spreads its mass `m_b` over its lanes with Logit
//! shares of the utilities `(V_i(r_i) + θ_i^b) / ν`; each lane density is
//!
//! ```text
//! r_i = fixed_i + scale_i · Σ_b m_b s_i^b(r)
//! ```
//!
//! The grid equilibrium uses `scale = 1`; a vehicle group uses
//! `scale_i = 1 / Δx_i` so that `r_i = ΔN φ_i / Δx_i`.
//!
//! The Jacobian of `F(r) = r − G(r)` is `I + W M D / ν` with `M` positive
//! semi-definite and `W`, `D` non-negative diagonal, so it is never singular
//! and damped Newton on `½‖F‖²` cannot stall away from a root.

use nalgebra::{DMatrix, DVector};

use super::{SolverMethod, SolverSettings};
use crate::error::{Error, Result};
use crate::model::FundamentalDiagram;

#[derive(Debug, Clone)]
pub(crate) struct ChoiceBlock {
    pub mass: f64,
    pub lanes: Vec<usize>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LaneSystem<'a> {
    pub diagrams: Vec<&'a FundamentalDiagram>,
    pub scale: Vec<f64>,
    pub fixed: Vec<f64>,
    pub blocks: Vec<ChoiceBlock>,
    pub nu: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LaneSolution {
    /// Per block, shares aligned with `ChoiceBlock::lanes`.
    pub shares: Vec<Vec<f64>>,
    pub residual: f64,
    pub iterations: usize,
}

/// Logit shares of `utilities / nu`, normalised after a max shift.
pub(crate) fn softmax(utilities: &[f64], nu: f64, out: &mut [f64]) {
    let top = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &u) in out.iter_mut().zip(utilities) {
        *o = ((u - top) / nu).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl LaneSystem<'_> {
    fn n(&self) -> usize {
        self.diagrams.len()
    }

    fn shares_at(&self, r: &[f64]) -> Vec<Vec<f64>> {
        let mut utilities = Vec::new();
        self.blocks
            .iter()
            .map(|b| {
                utilities.clear();
                utilities.extend(
                    b.lanes
                        .iter()
                        .zip(&b.theta)
                        .map(|(&i, &th)| self.diagrams[i].speed(r[i]) + th),
                );
                let mut s = vec![0.0; b.lanes.len()];
                softmax(&utilities, self.nu, &mut s);
                s
            })
            .collect()
    }

    /// Lane densities generated by the given block shares.
    pub fn image(&self, shares: &[Vec<f64>]) -> Vec<f64> {
        let mut g = self.fixed.clone();
        for (b, s) in self.blocks.iter().zip(shares) {
            for (&i, &si) in b.lanes.iter().zip(s) {
                g[i] += self.scale[i] * b.mass * si;
            }
        }
        g
    }

    /// Relative split residual of the partials `m_b s` against the shares
    /// recomputed from the lane densities they generate.
    fn split_residual(&self, shares: &[Vec<f64>]) -> f64 {
        let recomputed = self.shares_at(&self.image(shares));
        self.blocks
            .iter()
            .zip(shares.iter().zip(&recomputed))
            .flat_map(|(b, (s, t))| {
                let norm = b.mass.max(1.0);
                s.iter()
                    .zip(t)
                    .map(move |(si, ti)| b.mass * (si - ti).abs() / norm)
            })
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<LaneSolution> {
        if self.blocks.is_empty() {
            return Ok(LaneSolution {
                shares: Vec::new(),
                residual: 0.0,
                iterations: 0,
            });
        }
        match settings.method {
            SolverMethod::Picard => self.solve_picard(settings, self.uniform_start()),
            SolverMethod::Newton => self.solve_newton(settings),
            SolverMethod::Auto => {
                if self.blocks.len() == 1 && self.blocks[0].lanes.len() == 2 {
                    self.solve_scalar(settings)
                } else {
                    self.solve_newton(settings)
                }
            }
        }
    }

    fn uniform_start(&self) -> Vec<f64> {
        let shares: Vec<Vec<f64>> = self
            .blocks
            .iter()
            .map(|b| vec![1.0 / b.lanes.len() as f64; b.lanes.len()])
            .collect();
        self.image(&shares)
    }

    /// Two-lane single-block case: the unknown is the share φ of the first
    /// lane, and `f(φ) = φ − s(φ)` is strictly increasing on `[0, 1]`.
    /// Newton steps are kept inside a bisection bracket.
    fn solve_scalar(&self, settings: &SolverSettings) -> Result<LaneSolution> {
        let b = &self.blocks[0];
        let (ia, ib) = (b.lanes[0], b.lanes[1]);
        let (fa, fb) = (self.diagrams[ia], self.diagrams[ib]);
        let (ca, cb) = (self.scale[ia] * b.mass, self.scale[ib] * b.mass);
        let norm = b.mass / b.mass.max(1.0);

        let eval = |phi: f64| {
            let ra = self.fixed[ia] + ca * phi;
            let rb = self.fixed[ib] + cb * (1.0 - phi);
            let gap = (fb.speed(rb) + b.theta[1] - fa.speed(ra) - b.theta[0]) / self.nu;
            let s = 1.0 / (1.0 + gap.exp());
            let slope = 1.0
                + s * (1.0 - s) * (ca * -fa.speed_derivative(ra) + cb * -fb.speed_derivative(rb))
                    / self.nu;
            (phi - s, slope)
        };

        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut phi = 0.5;
        for iteration in 1..=settings.max_iterations.max(1) {
            let (f, slope) = eval(phi);
            let residual = norm * f.abs();
            if residual <= settings.residual_tol {
                return Ok(LaneSolution {
                    shares: vec![vec![phi, 1.0 - phi]],
                    residual,
                    iterations: iteration,
                });
            }
            if f > 0.0 {
                hi = phi;
            } else {
                lo = phi;
            }
            let newton = phi - f / slope;
            phi = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * 4.0 {
                // bracket exhausted: φ is as accurate as f64 allows
                let (f, _) = eval(phi);
                return finish(vec![vec![phi, 1.0 - phi]], norm * f.abs(), iteration, settings);
            }
        }
        let (f, _) = eval(phi);
        Err(Error::NotConverged {
            iterations: settings.max_iterations,
            residual: norm * f.abs(),
        })
    }

    fn defect(&self, r: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let shares = self.shares_at(r);
        let g = self.image(&shares);
        (r.iter().zip(&g).map(|(a, b)| a - b).collect(), shares)
    }

    fn jacobian(&self, r: &[f64], shares: &[Vec<f64>]) -> DMatrix<f64> {
        let n = self.n();
        let mut j = DMatrix::<f64>::identity(n, n);
        for (b, s) in self.blocks.iter().zip(shares) {
            for (p, &i) in b.lanes.iter().enumerate() {
                for (q, &k) in b.lanes.iter().enumerate() {
                    let ds = s[p] * (if p == q { 1.0 } else { 0.0 } - s[q]);
                    let dv = self.diagrams[k].speed_derivative(r[k]) / self.nu;
                    j[(i, k)] -= self.scale[i] * b.mass * ds * dv;
                }
            }
        }
        j
    }

    fn solve_newton(&self, settings: &SolverSettings) -> Result<LaneSolution> {
        let mut r = self.uniform_start();
        let (mut f, mut shares) = self.defect(&r);
        let mut merit = norm_sq(&f);
        for iteration in 1..=settings.max_iterations.max(1) {
            let residual = self.split_residual(&shares);
            if residual <= settings.residual_tol {
                return Ok(LaneSolution {
                    shares,
                    residual,
                    iterations: iteration,
                });
            }
            let jac = self.jacobian(&r, &shares);
            let rhs = -DVector::from_column_slice(&f);
            let Some(step) = jac.lu().solve(&rhs) else {
                break;
            };
            // Armijo backtracking on ½‖F‖²; the Newton direction has slope −‖F‖².
            let mut t = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = r.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                let (tf, ts) = self.defect(&trial);
                let tm = norm_sq(&tf);
                if tm <= (1.0 - 1e-4 * t) * merit || tm == 0.0 {
                    break Some((trial, tf, ts, tm));
                }
                t *= 0.5;
                if t < 1e-12 {
                    break None;
                }
            };
            match accepted {
                Some((nr, nf, ns, nm)) => {
                    r = nr;
                    f = nf;
                    shares = ns;
                    merit = nm;
                }
                None => {
                    // No further decrease of ‖F‖ is representable; accept if
                    // the split is within tolerance, else fall back.
                    let residual = self.split_residual(&shares);
                    if residual <= settings.residual_tol {
                        return Ok(LaneSolution {
                            shares,
                            residual,
                            iterations: iteration,
                        });
                    }
                    break;
                }
            }
        }
        let residual = self.split_residual(&shares);
        if residual <= settings.residual_tol {
            return Ok(LaneSolution {
                shares,
                residual,
                iterations: settings.max_iterations,
            });
        }
        self.solve_picard(settings, r)
    }

    /// Damped Picard iteration `r ← r + ω (G(r) − r)`; ω is halved whenever
    /// a trial step would increase the defect.
    fn solve_picard(&self, settings: &SolverSettings, start: Vec<f64>) -> Result<LaneSolution> {
        let mut r = start;
        let mut omega = settings.damping;
        let (mut f, mut shares) = self.defect(&r);
        let mut size = norm_inf(&f);
        let mut best = f64::INFINITY;
        for iteration in 1..=settings.max_iterations.max(1) {
            let residual = self.split_residual(&shares);
            best = best.min(residual);
            if residual <= settings.residual_tol {
                return Ok(LaneSolution {
                    shares,
                    residual,
                    iterations: iteration,
                });
            }
            loop {
                let trial: Vec<f64> = r.iter().zip(&f).map(|(a, fi)| a - omega * fi).collect();
                let (tf, ts) = self.defect(&trial);
                let ts_size = norm_inf(&tf);
                if ts_size <= size || omega < 1e-9 {
                    r = trial;
                    f = tf;
                    shares = ts;
                    size = ts_size;
                    omega = (omega * 1.25).min(1.0);
                    break;
                }
                omega *= 0.5;
            }
        }
        Err(Error::NotConverged {
            iterations: settings.max_iterations,
            residual: best,
        })
    }
}

fn finish(
    shares: Vec<Vec<f64>>,
    residual: f64,
    iterations: usize,
    settings: &SolverSettings,
) -> Result<LaneSolution> {
    if residual <= settings.residual_tol {
        Ok(LaneSolution {
            shares,
            residual,
            iterations,
        })
    } else {
        Err(Error::NotConverged {
            iterations,
            residual,
        })
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
