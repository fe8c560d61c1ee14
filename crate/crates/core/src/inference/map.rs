//! Stage one: maximize the log marginal posterior over all hyperparameters.
//!
//! A coarse grid over `log ℓ` seeds independent box-constrained ascents
//! (L-BFGS directions, projected onto the prior box, Armijo backtracking).
//! The best end point wins; ties go to the lower seed index.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kernels::{KernelParams, NoiseParams};
use crate::likelihood::{data_spread, log_marginal_posterior, value_and_grad, HyperParams, Priors};
use crate::model::{CalibrationFactors, ProfileSet};

use super::{par_map, DEFAULT_MINI_BATCH};

#[derive(Debug, Clone, PartialEq)]
pub struct MapSettings {
    pub grid_points: usize,
    pub max_iter: usize,
    /// Per-parameter gradient tolerance; the stopping test is
    /// `‖projected gradient‖ < grad_tol · n_params`.
    pub grad_tol: f64,
    /// Hold every `log a_i` at zero (uncalibrated baseline fit).
    pub fix_factors: bool,
    pub memory: usize,
}

impl Default for MapSettings {
    fn default() -> Self {
        Self { grid_points: 9, max_iter: 500, grad_tol: 1e-6, fix_factors: false, memory: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub start_log_length_scale: f64,
    pub start_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFit {
    pub theta: HyperParams,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub seeds: Vec<SeedOutcome>,
}

/// Value and gradient at a point.
type Objective<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

struct Ascent {
    x: Vec<f64>,
    fx: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64], free: &[bool]) -> Vec<f64> {
    (0..x.len())
        .map(|k| if !free[k] || (x[k] <= lo[k] && g[k] < 0.0) || (x[k] >= hi[k] && g[k] > 0.0) { 0.0 } else { g[k] })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion for the ascent direction `H·g`, with pairs stored for
/// the negated objective.
fn lbfgs_direction(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push((a, rho));
    }
    if let Some((s, y)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), (a, rho)) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q
}

fn maximize(
    f: &Objective<'_>,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    free: &[bool],
    settings: &MapSettings,
) -> Result<Ascent> {
    let clamp = |x: &mut Vec<f64>| {
        for k in 0..x.len() {
            x[k] = x[k].clamp(lo[k], hi[k]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at start".into()));
    }
    let tol = settings.grad_tol * x.len() as f64;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut pg = projected_gradient(&x, &g, lo, hi, free);
    let mut iterations = 0;
    let mut converged = norm(&pg) < tol;
    while !converged && iterations < settings.max_iter {
        iterations += 1;
        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = if memory.is_empty() { pg.clone() } else { lbfgs_direction(&pg, &memory) };
            for k in 0..d.len() {
                if pg[k] == 0.0 {
                    d[k] = 0.0;
                }
            }
            if dot(&d, &pg) <= 0.0 {
                memory.clear();
                d = pg.clone();
            }
            let mut t = if memory.is_empty() {
                let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (0.5 / dmax).min(1.0)
            } else {
                1.0
            };
            for _ in 0..50 {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                clamp(&mut xn);
                let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let (fn_, gn) = f(&xn)?;
                if fn_.is_finite() && fn_ >= fx + 1e-4 * dot(&g, &step) {
                    accepted = Some((xn, fn_, gn, step));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() || attempt == 1 || memory.is_empty() {
                break;
            }
            memory.clear();
        }
        let Some((xn, fn_, gn, step)) = accepted else {
            // No ascent possible at working precision.
            break;
        };
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        if dot(&step, &y) > 1e-12 * norm(&step) * norm(&y) {
            memory.push_back((step, y));
            if memory.len() > settings.memory {
                memory.pop_front();
            }
        }
        let gain = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        pg = projected_gradient(&x, &g, lo, hi, free);
        converged = norm(&pg) < tol;
        if gain.abs() <= 1e-15 * fx.abs().max(1.0) && norm(&pg) < 1e3 * tol {
            // Flat to machine precision near a stationary point.
            converged = true;
        }
    }
    Ok(Ascent { grad_norm: norm(&pg), x, fx, iterations, converged })
}

/// A few Newton steps with a finite-difference Hessian on the interior
/// coordinates. L-BFGS crawls along the weakly identified gain directions;
/// near the optimum the quadratic model finishes the job in a handful of steps.
fn newton_polish(
    f: &Objective<'_>,
    mut a: Ascent,
    lo: &[f64],
    hi: &[f64],
    free: &[bool],
    settings: &MapSettings,
) -> Result<Ascent> {
    let tol = settings.grad_tol * a.x.len() as f64;
    let h = 1e-5;
    for _ in 0..8 {
        let (_, g) = f(&a.x)?;
        let pg = projected_gradient(&a.x, &g, lo, hi, free);
        a.grad_norm = norm(&pg);
        if a.grad_norm < tol {
            a.converged = true;
            break;
        }
        let active: Vec<usize> =
            (0..a.x.len()).filter(|&k| free[k] && a.x[k] - h > lo[k] && a.x[k] + h < hi[k]).collect();
        let m = active.len();
        let mut hess = nalgebra::DMatrix::zeros(m, m);
        for (c, &k) in active.iter().enumerate() {
            let mut xp = a.x.clone();
            let mut xm = a.x.clone();
            xp[k] += h;
            xm[k] -= h;
            let (_, gp) = f(&xp)?;
            let (_, gm) = f(&xm)?;
            for (r, &i) in active.iter().enumerate() {
                hess[(r, c)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let precision = -(&hess + hess.transpose()) * 0.5;
        let Some(chol) = precision.cholesky() else { break };
        let rhs = nalgebra::DVector::from_iterator(m, active.iter().map(|&k| g[k]));
        let step = chol.solve(&rhs);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let mut xn = a.x.clone();
            for (r, &k) in active.iter().enumerate() {
                xn[k] = (xn[k] + t * step[r]).clamp(lo[k], hi[k]);
            }
            let (fn_, _) = f(&xn)?;
            if fn_.is_finite() && fn_ >= a.fx {
                a.x = xn;
                a.fx = fn_;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (_, g) = f(&a.x)?;
    a.grad_norm = norm(&projected_gradient(&a.x, &g, lo, hi, free));
    a.converged = a.grad_norm < tol;
    Ok(a)
}

/// Starting point shared by every seed, apart from `log ℓ`.
fn initial_theta(ps: &ProfileSet, pr: &Priors) -> HyperParams {
    let spread = data_spread(ps);
    let n = ps.n_channels();
    let clamp = |v: f64, b: (f64, f64)| v.clamp(b.0, b.1);
    HyperParams {
        kernel: KernelParams {
            log_length_scale: 0.5 * (pr.length_scale_bounds.0 + pr.length_scale_bounds.1),
            log_signal_sigma: clamp(spread.ln(), pr.signal_bounds),
        },
        noise: NoiseParams {
            log_sigma_base: clamp((0.1 * spread).ln(), pr.base_noise_bounds),
            log_eta: vec![0.0; n],
            hyper_scale: pr.noise_hyper_scale,
        },
        factors: CalibrationFactors::identity(n),
    }
}

/// Maximize the log marginal posterior of a centered profile set.
pub fn fit_map(ps: &ProfileSet, pr: &Priors, settings: &MapSettings) -> Result<MapFit> {
    if ps.n_profiles() == 0 {
        return Err(Error::Config("fit_map needs at least one profile".into()));
    }
    if settings.grid_points == 0 {
        return Err(Error::Config("grid_points must be positive".into()));
    }
    pr.validate()?;
    crate::model::validate(ps).into_result()?;
    if ps.n_profiles() > DEFAULT_MINI_BATCH {
        log::warn!(
            "mini-batch of {} profiles: the independent-profile model degrades as M grows beyond {}",
            ps.n_profiles(),
            DEFAULT_MINI_BATCH
        );
    }

    let n = ps.n_channels();
    let base = initial_theta(ps, pr);
    let (lo, hi) = pr.box_bounds(n);
    let mut free = vec![true; 3 + 2 * n];
    if settings.fix_factors {
        free[3 + n..].iter_mut().for_each(|v| *v = false);
    }
    let (llo, lhi) = pr.length_scale_bounds;
    let k = settings.grid_points;
    let starts: Vec<f64> = (0..k).map(|i| llo + (lhi - llo) * (i as f64 + 0.5) / k as f64).collect();

    let objective = |x: &[f64]| value_and_grad(ps, &base.with_vec(x), pr);
    let runs = par_map(starts.clone(), |start| {
        let mut x0 = base.to_vec();
        x0[0] = start;
        let start_objective = log_marginal_posterior(ps, &base.with_vec(&x0), pr).unwrap_or(f64::NEG_INFINITY);
        (start_objective, maximize(&objective, &x0, &lo, &hi, &free, settings))
    });

    let mut seeds = Vec::with_capacity(k);
    let mut best: Option<(usize, Ascent)> = None;
    for (idx, (start, (start_objective, run))) in starts.into_iter().zip(runs).enumerate() {
        match run {
            Ok(a) => {
                seeds.push(SeedOutcome {
                    start_log_length_scale: start,
                    start_objective,
                    final_objective: a.fx,
                    iterations: a.iterations,
                    converged: a.converged,
                });
                if best.as_ref().is_none_or(|(_, b)| a.fx > b.fx) {
                    best = Some((idx, a));
                }
            }
            Err(e) => {
                log::debug!("MAP seed {idx} at log ℓ = {start:.3} failed: {e}");
                seeds.push(SeedOutcome {
                    start_log_length_scale: start,
                    start_objective,
                    final_objective: f64::NEG_INFINITY,
                    iterations: 0,
                    converged: false,
                });
            }
        }
    }
    let Some((_, best)) = best else {
        return Err(Error::MapFailed { reason: "no start produced a finite objective".into(), best: Box::new(base) });
    };
    let best = if best.converged { best } else { newton_polish(&objective, best, &lo, &hi, &free, settings)? };
    let theta = base.with_vec(&best.x);
    Ok(MapFit { theta, objective: best.fx, grad_norm: best.grad_norm, converged: best.converged, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lbfgs_maximizes_quadratic() {
        // f(x) = -½ (x - c)' D (x - c)
        let c = [1.0, -2.0, 0.5];
        let dgn = [1.0, 10.0, 100.0];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut v = 0.0;
            let mut g = vec![0.0; 3];
            for k in 0..3 {
                v -= 0.5 * dgn[k] * (x[k] - c[k]).powi(2);
                g[k] = -dgn[k] * (x[k] - c[k]);
            }
            Ok((v, g))
        };
        let inf = vec![f64::INFINITY; 3];
        let ninf = vec![f64::NEG_INFINITY; 3];
        let a = maximize(&f, &[0.0; 3], &ninf, &inf, &[true; 3], &MapSettings::default()).unwrap();
        assert!(a.converged);
        for k in 0..3 {
            assert!((a.x[k] - c[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn box_constraint_is_respected() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((-(x[0] - 5.0).powi(2), vec![-2.0 * (x[0] - 5.0)])) };
        let a = maximize(&f, &[0.0], &[-1.0], &[2.0], &[true], &MapSettings::default()).unwrap();
        assert_eq!(a.x[0], 2.0);
        assert!(a.converged);
    }

    #[test]
    fn fixed_coordinates_do_not_move() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((-(x[0] - 1.0).powi(2) - (x[1] - 1.0).powi(2), vec![-2.0 * (x[0] - 1.0), -2.0 * (x[1] - 1.0)]))
        };
        let inf = vec![f64::INFINITY; 2];
        let ninf = vec![f64::NEG_INFINITY; 2];
        let a = maximize(&f, &[0.0, 0.0], &ninf, &inf, &[true, false], &MapSettings::default()).unwrap();
        assert_eq!(a.x[1], 0.0);
        assert!((a.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_rejected() {
        let ps = ProfileSet::new(vec![0.0, 1.0, 2.0], nalgebra::DMatrix::zeros(3, 0)).unwrap();
        let pr = Priors {
            factor_scale: 0.1,
            noise_hyper_scale: 0.5,
            length_scale_bounds: (-2.0, 1.0),
            signal_bounds: (-2.0, 1.0),
            base_noise_bounds: (-5.0, 1.0),
        };
        assert!(fit_map(&ps, &pr, &MapSettings::default()).is_err());
    }
}
