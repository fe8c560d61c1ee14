//! GP posteriors of the latent profile and its first two derivatives, and
//! Monte-Carlo bands over the gain posterior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rbf_deriv, rbf_mixed_deriv, KernelParams};
use crate::likelihood::{observed_cov, HyperParams, ProfileView};
use crate::linalg::{factor, Factor};
use crate::model::ProfileSet;
use crate::rng::{derive_seed, Stream};

use super::mcmc::{quantile_sorted, McmcChain};
use super::par_map;

/// `n` evenly spaced points covering the channel positions plus 5% of the
/// span on either side.
pub fn default_grid(ps: &ProfileSet, n: usize) -> Vec<f64> {
    let (lo, hi) = ps.position_range();
    let pad = 0.05 * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    if n < 2 {
        return vec![0.5 * (a + b); n];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Conditioning state for one profile under fixed hyperparameters.
struct Conditioner {
    factor: Factor,
    alpha: DVector<f64>,
    gains: Vec<f64>,
    positions: Vec<f64>,
    kernel: KernelParams,
    offset: f64,
}

impl Conditioner {
    fn new(view: &ProfileView, theta: &HyperParams) -> Result<Self> {
        let c = observed_cov(&view.positions, theta, &view.active)?;
        let factor = factor(&c)?;
        let alpha = factor.solve(&view.residual(&theta.factors.log_a));
        let gains = view.active.iter().map(|&i| theta.factors.log_a[i].exp()).collect();
        Ok(Self { factor, alpha, gains, positions: view.positions.clone(), kernel: theta.kernel, offset: view.offset })
    }

    /// Rows `a_p ∂^order k(g, x_p)`, one per grid point.
    fn cross(&self, grid: &[f64], order: usize) -> Result<DMatrix<f64>> {
        let mut r = DMatrix::zeros(grid.len(), self.positions.len());
        for (g, &xg) in grid.iter().enumerate() {
            for (p, &xp) in self.positions.iter().enumerate() {
                r[(g, p)] = self.gains[p] * rbf_deriv(xg, xp, &self.kernel, order)?;
            }
        }
        Ok(r)
    }

    /// Mean and `L⁻¹ Rᵀ` (so the explained covariance is `VᵀV`).
    fn project(&self, grid: &[f64], order: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let r = self.cross(grid, order)?;
        let mean = (&r * &self.alpha).iter().cloned().collect();
        let v = self
            .factor
            .chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&r.transpose())
            .ok_or(Error::NotPositiveDefinite)?;
        Ok((mean, v))
    }

    fn full(&self, grid: &[f64], order: usize) -> Result<LatentPosterior> {
        let (mean, v) = self.project(grid, order)?;
        let g = grid.len();
        let mut cov = DMatrix::zeros(g, g);
        for a in 0..g {
            for b in 0..g {
                cov[(a, b)] = rbf_mixed_deriv(grid[a], grid[b], &self.kernel, order)?;
            }
        }
        cov -= v.transpose() * &v;
        Ok(LatentPosterior { mean, cov })
    }

    fn marginals(&self, grid: &[f64], order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mean, v) = self.project(grid, order)?;
        let prior = rbf_mixed_deriv(0.0, 0.0, &self.kernel, order)?;
        let var = v.column_iter().map(|c| prior - c.norm_squared()).collect();
        Ok((mean, var))
    }
}

fn check_grid(grid: &[f64], order: usize) -> Result<()> {
    if order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if grid.is_empty() {
        return Err(Error::EmptyPositions);
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("grid position".into()));
    }
    Ok(())
}

fn conditioner(ps: &ProfileSet, j: usize, theta: &HyperParams) -> Result<Conditioner> {
    if j >= ps.n_profiles() {
        return Err(Error::Shape(format!("profile index {j} of {}", ps.n_profiles())));
    }
    let view = ProfileView::of(ps, j);
    if view.active.is_empty() {
        return Err(Error::UnderdeterminedProfile { profile: ps.profile_ids[j].clone(), active: 0 });
    }
    Conditioner::new(&view, theta)
}

/// Posterior of the `order`-th derivative of profile `j`'s latent function on
/// `grid`, with the gains in `theta` held fixed. The mean excludes the
/// profile's stored offset.
pub fn latent_posterior(
    ps: &ProfileSet,
    j: usize,
    theta: &HyperParams,
    grid: &[f64],
    order: usize,
) -> Result<LatentPosterior> {
    check_grid(grid, order)?;
    conditioner(ps, j, theta)?.full(grid, order)
}

/// Pointwise mean and variance only; avoids forming the grid covariance.
pub fn latent_marginals(
    ps: &ProfileSet,
    j: usize,
    theta: &HyperParams,
    grid: &[f64],
    order: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_grid(grid, order)?;
    conditioner(ps, j, theta)?.marginals(grid, order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    pub draws_per_sample: usize,
    /// Evenly thin the chain to at most this many gain samples.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self { draws_per_sample: 1, max_samples: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderBands {
    pub order: usize,
    /// One band per profile.
    pub profiles: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub grid: Vec<f64>,
    pub profile_ids: Vec<String>,
    pub orders: Vec<OrderBands>,
    pub map_hyperparams: HyperParams,
    pub n_draws: usize,
}

impl PosteriorSummary {
    pub fn order(&self, order: usize) -> Option<&OrderBands> {
        self.orders.iter().find(|o| o.order == order)
    }
}

fn selected_samples(chain: &McmcChain, max_samples: usize) -> Vec<usize> {
    let s = chain.samples.len();
    if s <= max_samples {
        (0..s).collect()
    } else {
        (0..max_samples).map(|k| k * s / max_samples).collect()
    }
}

fn band_from_draws(draws: &[f64], n_draws: usize, g: usize) -> Band {
    let mut band =
        Band { median: Vec::with_capacity(g), lower95: Vec::with_capacity(g), upper95: Vec::with_capacity(g) };
    let mut column = vec![0.0; n_draws];
    for point in 0..g {
        for (d, slot) in column.iter_mut().enumerate() {
            *slot = draws[d * g + point];
        }
        column.sort_by(f64::total_cmp);
        band.lower95.push(quantile_sorted(&column, 0.025));
        band.median.push(quantile_sorted(&column, 0.5));
        band.upper95.push(quantile_sorted(&column, 0.975));
    }
    band
}

/// Pointwise median and central 95% band of the latent profile and its
/// derivatives, mixing the gain posterior in `chain` with the Gaussian
/// posterior of the latent given each gain sample. Each selected sample
/// contributes `draws_per_sample` pointwise-Gaussian draws; sample `k`,
/// profile `j` and order `o` use the stream
/// `derive_seed(derive_seed(seed, k), 3·j + o)`, so a band does not depend on
/// which other orders were requested. Stored offsets are added back to
/// order-0 output.
pub fn summarize(
    ps: &ProfileSet,
    theta_map: &HyperParams,
    chain: &McmcChain,
    grid: &[f64],
    orders: &[usize],
    cfg: &SummaryConfig,
) -> Result<PosteriorSummary> {
    if chain.samples.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    for &o in orders {
        check_grid(grid, o)?;
    }
    if orders.is_empty() {
        return Err(Error::Config("no derivative orders requested".into()));
    }
    let picks = selected_samples(chain, cfg.max_samples.max(1));
    let n_draws = picks.len() * cfg.draws_per_sample;
    if n_draws < 100 {
        return Err(Error::InsufficientDraws(n_draws));
    }
    let m = ps.n_profiles();
    let g = grid.len();
    let views = ProfileView::all(ps);

    // Per sample: one block per (profile, order), draw-major.
    let blocks = par_map(picks.iter().copied().enumerate().collect(), |(k, s)| -> Result<Vec<Vec<f64>>> {
        let mut theta = theta_map.clone();
        theta.factors.log_a.clone_from(&chain.samples[s]);
        let sample_seed = derive_seed(cfg.seed, k as u64);
        let mut out = Vec::with_capacity(m * orders.len());
        for (j, view) in views.iter().enumerate() {
            let cond = Conditioner::new(view, &theta)?;
            for &order in orders {
                let (mean, var) = cond.marginals(grid, order)?;
                let shift = if order == 0 { cond.offset } else { 0.0 };
                let mut st = Stream::new(derive_seed(sample_seed, (3 * j + order) as u64));
                let mut block = Vec::with_capacity(cfg.draws_per_sample * g);
                for _ in 0..cfg.draws_per_sample {
                    for (mu, v) in mean.iter().zip(&var) {
                        block.push(mu + shift + v.max(0.0).sqrt() * st.normal());
                    }
                }
                out.push(block);
            }
        }
        Ok(out)
    });
    let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;

    let mut result = Vec::with_capacity(orders.len());
    for (oi, &order) in orders.iter().enumerate() {
        let mut profiles = Vec::with_capacity(m);
        for j in 0..m {
            let idx = j * orders.len() + oi;
            let draws: Vec<f64> = blocks.iter().flat_map(|b| b[idx].iter().copied()).collect();
            profiles.push(band_from_draws(&draws, n_draws, g));
        }
        result.push(OrderBands { order, profiles });
    }
    Ok(PosteriorSummary {
        grid: grid.to_vec(),
        profile_ids: ps.profile_ids.clone(),
        orders: result,
        map_hyperparams: theta_map.clone(),
        n_draws,
    })
}
