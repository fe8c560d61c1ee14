//! Stage two: random-walk Metropolis over the log gains.
//!
//! Kernel and noise hyperparameters stay at their MAP values. Proposals are
//! isotropic Gaussians in whitened coordinates `z = L⁻¹ log a`, where `L L'`
//! is the Laplace covariance at the MAP (inverse negative Hessian of the log
//! posterior). Smooth gain patterns are barely constrained by the data while
//! channel-to-channel differences are, so without whitening the posterior is
//! too elongated for a single isotropic step. The step size follows a
//! Robbins–Monro recursion on the acceptance indicator during burn-in and is
//! frozen afterwards, so retained draws come from a fixed Metropolis kernel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{value_and_grad, FactorPosterior, HyperParams, Priors};
use crate::model::ProfileSet;
use crate::rng::{derive_seed, Stream};

use super::diagnostics::{diagnostics, DiagnosticsReport};
use super::par_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Iterations per chain, burn-in included.
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Std of the start jitter around the MAP gains. Without preconditioning
    /// it is also the initial proposal step.
    pub init_step: f64,
    /// Whiten proposals with the Laplace covariance at the MAP.
    pub precondition: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            burn_in: 4000,
            thin: 1,
            n_chains: 4,
            target_accept: 0.35,
            seed: 0,
            init_step: 0.02,
            precondition: true,
        }
    }
}

impl McmcConfig {
    pub fn draws_per_chain(&self) -> usize {
        self.n_samples.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.thin == 0 || self.n_chains == 0 {
            return Err(Error::Config("n_samples, thin and n_chains must be positive".into()));
        }
        if self.burn_in >= self.n_samples {
            return Err(Error::Config("burn_in must be smaller than n_samples".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if !(self.init_step > 0.0) {
            return Err(Error::Config("init_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    /// Retained draws of `log a`, chain-major: chain `c` owns rows
    /// `c·draws_per_chain .. (c+1)·draws_per_chain`.
    pub samples: Vec<Vec<f64>>,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    /// Post-burn-in `accepted / proposed` over all chains.
    pub acceptance_rate: f64,
    pub accepted: u64,
    pub proposed: u64,
    /// Frozen proposal step of each chain.
    pub step_sizes: Vec<f64>,
    pub split_rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub seed: u64,
    pub converged: bool,
}

impl McmcChain {
    pub fn n_params(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Draws of parameter `k`, one vector per chain.
    pub fn per_chain(&self, k: usize) -> Vec<Vec<f64>> {
        self.samples.chunks(self.draws_per_chain.max(1)).map(|c| c.iter().map(|row| row[k]).collect()).collect()
    }

    /// Build a chain from raw draws and fill in its diagnostics.
    pub fn from_draws(per_chain: Vec<Vec<Vec<f64>>>, accepted: u64, proposed: u64, seed: u64) -> Self {
        let n_chains = per_chain.len();
        let draws_per_chain = per_chain.first().map_or(0, Vec::len);
        let samples: Vec<Vec<f64>> = per_chain.into_iter().flatten().collect();
        let mut chain = Self {
            samples,
            n_chains,
            draws_per_chain,
            acceptance_rate: if proposed > 0 { accepted as f64 / proposed as f64 } else { 0.0 },
            accepted,
            proposed,
            step_sizes: Vec::new(),
            split_rhat: Vec::new(),
            ess: Vec::new(),
            seed,
            converged: true,
        };
        let report = diagnostics(&chain);
        chain.split_rhat = report.split_rhat.clone();
        chain.ess = report.ess.clone();
        chain.converged = !report.rhat_flag();
        chain
    }

    pub fn diagnostics(&self) -> DiagnosticsReport {
        diagnostics(self)
    }

    /// Per-parameter quantile over all retained draws.
    pub fn quantile(&self, k: usize, q: f64) -> f64 {
        let mut v: Vec<f64> = self.samples.iter().map(|r| r[k]).collect();
        v.sort_by(f64::total_cmp);
        quantile_sorted(&v, q)
    }
}

/// Linear interpolation between order statistics (`(n - 1)·q` positioning).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct ChainRun {
    draws: Vec<Vec<f64>>,
    accepted: u64,
    proposed: u64,
    step: f64,
}

/// Lower Cholesky factor of the Laplace covariance of `log a` at `theta`,
/// from central differences of the analytic gradient. `None` when the
/// Hessian is not negative definite.
pub fn laplace_factor(ps: &ProfileSet, theta: &HyperParams, pr: &Priors) -> Result<Option<DMatrix<f64>>> {
    let n = theta.n_channels();
    let a0 = 3 + n;
    let x0 = theta.to_vec();
    let h = 1e-5;
    let mut hess = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[a0 + k] += h;
        xm[a0 + k] -= h;
        let (_, gp) = value_and_grad(ps, &theta.with_vec(&xp), pr)?;
        let (_, gm) = value_and_grad(ps, &theta.with_vec(&xm), pr)?;
        for i in 0..n {
            hess[(i, k)] = (gp[a0 + i] - gm[a0 + i]) / (2.0 * h);
        }
    }
    let precision = -(&hess + hess.transpose()) * 0.5;
    if precision.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    Ok(precision.cholesky().and_then(|c| c.inverse().cholesky()).map(|c| c.l()))
}

fn run_chain(
    target: &FactorPosterior,
    start: &[f64],
    whitening: &DMatrix<f64>,
    initial_step: f64,
    mc: &McmcConfig,
    seed: u64,
) -> Result<ChainRun> {
    let n = start.len();
    let mut st = Stream::new(seed);
    let mut x: Vec<f64> = start.iter().map(|v| v + mc.init_step * st.normal()).collect();
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::NonFinite("log posterior at chain start".into()));
    }
    let mut log_step = initial_step.ln();
    let mut draws = Vec::with_capacity(mc.draws_per_chain());
    let (mut accepted, mut proposed) = (0u64, 0u64);
    let mut proposal = vec![0.0; n];
    let mut z = DVector::zeros(n);
    for iter in 0..mc.n_samples {
        let step = log_step.exp();
        for zi in z.iter_mut() {
            *zi = step * st.normal();
        }
        let dx = whitening * &z;
        for ((p, xi), d) in proposal.iter_mut().zip(&x).zip(dx.iter()) {
            *p = xi + d;
        }
        let lp_new = target.log_density(&proposal);
        let log_u = st.uniform().ln();
        let accept = lp_new.is_finite() && log_u < lp_new - lp;
        if accept {
            x.copy_from_slice(&proposal);
            lp = lp_new;
        }
        if iter < mc.burn_in {
            let rate = if accept { 1.0 } else { 0.0 };
            log_step += (rate - mc.target_accept) / ((iter + 1) as f64).powf(0.6);
        } else {
            proposed += 1;
            accepted += accept as u64;
            if (iter - mc.burn_in).is_multiple_of(mc.thin) && draws.len() < mc.draws_per_chain() {
                draws.push(x.clone());
            }
        }
    }
    Ok(ChainRun { draws, accepted, proposed, step: log_step.exp() })
}

/// Sample `log a` with kernel and noise fixed at `theta_map`. Chain `c` uses
/// the stream seeded by `derive_seed(seed, c)`.
pub fn sample_factors(ps: &ProfileSet, theta_map: &HyperParams, pr: &Priors, mc: &McmcConfig) -> Result<McmcChain> {
    mc.validate()?;
    let target = FactorPosterior::new(ps, theta_map, pr)?;
    if !target.log_density(&theta_map.factors.log_a).is_finite() {
        return Err(Error::NonFinite("log posterior at MAP gains".into()));
    }
    let start = theta_map.factors.log_a.clone();
    let n = start.len();
    let laplace = if mc.precondition { laplace_factor(ps, theta_map, pr)? } else { None };
    let (whitening, initial_step) = match laplace {
        Some(l) => (l, 2.38 / (n as f64).sqrt()),
        None => {
            if mc.precondition {
                log::warn!("Laplace covariance unavailable; using isotropic proposals");
            }
            (DMatrix::identity(n, n), mc.init_step)
        }
    };
    let runs = par_map((0..mc.n_chains).collect(), |c| {
        run_chain(&target, &start, &whitening, initial_step, mc, derive_seed(mc.seed, c as u64))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let accepted = runs.iter().map(|r| r.accepted).sum();
    let proposed = runs.iter().map(|r| r.proposed).sum();
    let steps = runs.iter().map(|r| r.step).collect();
    let mut chain = McmcChain::from_draws(runs.into_iter().map(|r| r.draws).collect(), accepted, proposed, mc.seed);
    chain.step_sizes = steps;
    if !chain.converged {
        log::warn!("MCMC not converged: split-R̂ above {}", super::RHAT_WARN);
    }
    Ok(chain)
}
