//! Marginal likelihood and log marginal posterior of the hierarchical model.
//!
//! Given hyperparameters, the masked-in observations of profile `j` are
//! Gaussian with covariance `C_j = A K_f A + Σ_n` (gains `A = diag(a)`,
//! channel noise `Σ_n = diag(σ_i²)`), and profiles are independent. Data are
//! expected centered: the level `μ_j` removed from profile `j` is a latent
//! quantity, so each channel reads it back as `a_i μ_j` and the residual that
//! enters the density is `d_ij - (a_i - 1) μ_j`.
//!
//! Parameter vectors used by the gradient and the optimizer are laid out as
//! `[log ℓ, log σ_f, log σ_b, η_0 .. η_{N-1}, log a_0 .. log a_{N-1}]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rbf_hyper_grads, rbf_matrix, KernelParams, NoiseParams};
use crate::linalg::{factor, factor_with_jitter, Factor};
use crate::model::{CalibrationFactors, ProfileSet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub kernel: KernelParams,
    pub noise: NoiseParams,
    pub factors: CalibrationFactors,
}

impl HyperParams {
    pub fn n_channels(&self) -> usize {
        self.factors.log_a.len()
    }

    pub fn n_params(&self) -> usize {
        3 + 2 * self.n_channels()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.kernel.log_length_scale);
        v.push(self.kernel.log_signal_sigma);
        v.push(self.noise.log_sigma_base);
        v.extend_from_slice(&self.noise.log_eta);
        v.extend_from_slice(&self.factors.log_a);
        v
    }

    /// Inverse of [`HyperParams::to_vec`]; `hyper_scale` is taken from `self`.
    pub fn with_vec(&self, v: &[f64]) -> Self {
        let n = self.n_channels();
        assert_eq!(v.len(), 3 + 2 * n, "parameter vector length");
        Self {
            kernel: KernelParams { log_length_scale: v[0], log_signal_sigma: v[1] },
            noise: NoiseParams {
                log_sigma_base: v[2],
                log_eta: v[3..3 + n].to_vec(),
                hyper_scale: self.noise.hyper_scale,
            },
            factors: CalibrationFactors { log_a: v[3 + n..].to_vec() },
        }
    }

    fn check_channels(&self, ps: &ProfileSet) -> Result<()> {
        let n = ps.n_channels();
        if self.noise.n_channels() != n || self.factors.log_a.len() != n {
            return Err(Error::Shape(format!(
                "hyperparameters for {} noise / {} gain channels, data has {}",
                self.noise.n_channels(),
                self.factors.log_a.len(),
                n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Std of the Normal prior on each `log a_i`.
    pub factor_scale: f64,
    /// Std of the Normal prior on each `η_i`.
    pub noise_hyper_scale: f64,
    pub length_scale_bounds: (f64, f64),
    pub signal_bounds: (f64, f64),
    pub base_noise_bounds: (f64, f64),
}

pub const DEFAULT_FACTOR_SCALE: f64 = 0.1;
pub const DEFAULT_NOISE_HYPER_SCALE: f64 = 0.5;

impl Priors {
    /// Data-scaled defaults: length scale between half the smallest channel
    /// spacing and twice the span, amplitudes relative to the data spread.
    pub fn for_profile_set(ps: &ProfileSet) -> Self {
        let (lo, hi) = ps.position_range();
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let min_gap = ps.positions.windows(2).map(|w| w[1] - w[0]).fold(span, f64::min).max(1e-6 * span);
        let spread = data_spread(ps);
        Self {
            factor_scale: DEFAULT_FACTOR_SCALE,
            noise_hyper_scale: DEFAULT_NOISE_HYPER_SCALE,
            length_scale_bounds: ((0.5 * min_gap).ln(), (2.0 * span).ln()),
            signal_bounds: ((1e-3 * spread).ln(), (1e2 * spread).ln()),
            base_noise_bounds: ((1e-5 * spread).ln(), (10.0 * spread).ln()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("length_scale_bounds", self.length_scale_bounds),
            ("signal_bounds", self.signal_bounds),
            ("base_noise_bounds", self.base_noise_bounds),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name}: need finite lower < upper")));
            }
        }
        if !(self.factor_scale > 0.0) || !(self.noise_hyper_scale > 0.0) {
            return Err(Error::Config("prior scales must be positive".into()));
        }
        Ok(())
    }

    /// `(lower, upper)` per coordinate of the parameter vector; unbounded
    /// coordinates get infinities.
    pub fn box_bounds(&self, n_channels: usize) -> (Vec<f64>, Vec<f64>) {
        let n = 3 + 2 * n_channels;
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for (k, b) in [self.length_scale_bounds, self.signal_bounds, self.base_noise_bounds].into_iter().enumerate() {
            lo[k] = b.0;
            hi[k] = b.1;
        }
        (lo, hi)
    }
}

/// Root-mean-square of masked-in data about each profile's mean, floored so
/// an all-constant set still gets usable bounds.
pub(crate) fn data_spread(ps: &ProfileSet) -> f64 {
    let mut ss = 0.0;
    let mut count = 0usize;
    for j in 0..ps.n_profiles() {
        let active = ps.active_channels(j);
        if active.is_empty() {
            continue;
        }
        let mean = active.iter().map(|&i| ps.data[(i, j)]).sum::<f64>() / active.len() as f64;
        for &i in &active {
            ss += (ps.data[(i, j)] - mean).powi(2);
            count += 1;
        }
    }
    let rms = if count > 0 { (ss / count as f64).sqrt() } else { 0.0 };
    if rms > 0.0 && rms.is_finite() {
        rms
    } else {
        1.0
    }
}

fn log_normal_density(x: f64, scale: f64) -> f64 {
    -0.5 * (x / scale).powi(2) - scale.ln() - 0.5 * LN_2PI
}

fn in_bounds(x: f64, b: (f64, f64)) -> bool {
    x >= b.0 && x <= b.1
}

/// Observation covariance `A K_f A + Σ_n` over `active` channels (no jitter).
pub fn observed_cov(active_positions: &[f64], hp: &HyperParams, active: &[usize]) -> Result<DMatrix<f64>> {
    if active.is_empty() || active_positions.is_empty() {
        return Err(Error::EmptyPositions);
    }
    if active.len() != active_positions.len() {
        return Err(Error::Shape("active positions and indices differ in length".into()));
    }
    let k = rbf_matrix(active_positions, active_positions, &hp.kernel)?;
    cov_from_kernel(&k, hp, active)
}

fn cov_from_kernel(k: &DMatrix<f64>, hp: &HyperParams, active: &[usize]) -> Result<DMatrix<f64>> {
    let n = hp.n_channels();
    if let Some(&bad) = active.iter().find(|&&i| i >= n) {
        return Err(Error::ChannelOutOfRange { index: bad, n_channels: n });
    }
    let gains: Vec<f64> = active.iter().map(|&i| hp.factors.log_a[i].exp()).collect();
    let mut c = DMatrix::from_fn(active.len(), active.len(), |p, q| gains[p] * gains[q] * k[(p, q)]);
    for (p, &i) in active.iter().enumerate() {
        c[(p, p)] += hp.noise.variance(i);
    }
    Ok(c)
}

fn density_from_factor(r: &DVector<f64>, f: &Factor) -> f64 {
    let alpha = f.solve(r);
    -0.5 * r.dot(&alpha) - 0.5 * f.log_det() - 0.5 * r.len() as f64 * LN_2PI
}

/// Log density of `r` under `Normal(0, c)` via Cholesky; jitter is added only
/// if `c` is not numerically positive definite.
pub fn gaussian_log_density(r: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    Ok(density_from_factor(r, &factor(c)?))
}

/// As [`gaussian_log_density`] but always adding `fraction·trace(c)/n` to the diagonal.
pub fn gaussian_log_density_jittered(r: &DVector<f64>, c: &DMatrix<f64>, fraction: f64) -> Result<f64> {
    Ok(density_from_factor(r, &factor_with_jitter(c, fraction)?))
}

/// Masked-in slice of one profile.
#[derive(Debug, Clone)]
pub(crate) struct ProfileView {
    pub active: Vec<usize>,
    pub positions: Vec<f64>,
    pub data: DVector<f64>,
    pub offset: f64,
}

impl ProfileView {
    pub fn of(ps: &ProfileSet, j: usize) -> Self {
        let active = ps.active_channels(j);
        let positions = active.iter().map(|&i| ps.positions[i]).collect();
        let data = DVector::from_iterator(active.len(), active.iter().map(|&i| ps.data[(i, j)]));
        Self { active, positions, data, offset: ps.offsets[j] }
    }

    pub fn all(ps: &ProfileSet) -> Vec<Self> {
        (0..ps.n_profiles()).map(|j| Self::of(ps, j)).collect()
    }

    /// `d - (a - 1) μ` on the active channels.
    pub fn residual(&self, log_a: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.active.len(),
            self.active.iter().zip(self.data.iter()).map(|(&i, d)| d - (log_a[i].exp() - 1.0) * self.offset),
        )
    }
}

fn check_set(ps: &ProfileSet, hp: &HyperParams) -> Result<()> {
    hp.check_channels(ps)?;
    ps.check_profiles_determined()
}

/// Sum over profiles of the Gaussian log density of their masked-in residuals.
pub fn log_marginal_likelihood(ps: &ProfileSet, hp: &HyperParams) -> Result<f64> {
    check_set(ps, hp)?;
    let mut total = 0.0;
    for view in ProfileView::all(ps) {
        let k = rbf_matrix(&view.positions, &view.positions, &hp.kernel)?;
        let c = cov_from_kernel(&k, hp, &view.active)?;
        total += gaussian_log_density(&view.residual(&hp.factors.log_a), &c)?;
    }
    Ok(total)
}

/// Log prior density; `-∞` outside the bounded coordinates' boxes.
pub fn log_prior(hp: &HyperParams, pr: &Priors) -> f64 {
    if !in_bounds(hp.kernel.log_length_scale, pr.length_scale_bounds)
        || !in_bounds(hp.kernel.log_signal_sigma, pr.signal_bounds)
        || !in_bounds(hp.noise.log_sigma_base, pr.base_noise_bounds)
    {
        return f64::NEG_INFINITY;
    }
    let factors: f64 = hp.factors.log_a.iter().map(|&l| log_normal_density(l, pr.factor_scale)).sum();
    let offsets: f64 = hp.noise.log_eta.iter().map(|&e| log_normal_density(e, pr.noise_hyper_scale)).sum();
    factors + offsets
}

pub fn log_marginal_posterior(ps: &ProfileSet, hp: &HyperParams, pr: &Priors) -> Result<f64> {
    hp.check_channels(ps)?;
    let prior = log_prior(hp, pr);
    if prior == f64::NEG_INFINITY {
        return Ok(prior);
    }
    Ok(log_marginal_likelihood(ps, hp)? + prior)
}

pub fn grad_log_marginal_posterior(ps: &ProfileSet, hp: &HyperParams, pr: &Priors) -> Result<Vec<f64>> {
    value_and_grad(ps, hp, pr).map(|(_, g)| g)
}

/// Log marginal posterior together with its gradient in the layout of
/// [`HyperParams::to_vec`]. Outside the prior box the value is `-∞` and the
/// gradient is all zeros.
pub fn value_and_grad(ps: &ProfileSet, hp: &HyperParams, pr: &Priors) -> Result<(f64, Vec<f64>)> {
    check_set(ps, hp)?;
    let n = hp.n_channels();
    let mut grad = vec![0.0; 3 + 2 * n];
    let prior = log_prior(hp, pr);
    if prior == f64::NEG_INFINITY {
        return Ok((prior, grad));
    }
    let mut value = prior;
    let (eta0, a0) = (3, 3 + n);
    for (i, &l) in hp.factors.log_a.iter().enumerate() {
        grad[a0 + i] = -l / pr.factor_scale.powi(2);
    }
    for (i, &e) in hp.noise.log_eta.iter().enumerate() {
        grad[eta0 + i] = -e / pr.noise_hyper_scale.powi(2);
    }

    for view in ProfileView::all(ps) {
        let (d_len, _) = rbf_hyper_grads(&view.positions, &hp.kernel)?;
        let k = rbf_matrix(&view.positions, &view.positions, &hp.kernel)?;
        let c = cov_from_kernel(&k, hp, &view.active)?;
        let f = factor(&c)?;
        let r = view.residual(&hp.factors.log_a);
        let alpha = f.solve(&r);
        value += -0.5 * r.dot(&alpha) - 0.5 * f.log_det() - 0.5 * r.len() as f64 * LN_2PI;

        // W = αα' - C⁻¹, so ∂L/∂θ = ½ tr(W ∂C/∂θ).
        let mut w = f.inverse();
        w.neg_mut();
        w.ger(1.0, &alpha, &alpha, 1.0);

        let gains: Vec<f64> = view.active.iter().map(|&i| hp.factors.log_a[i].exp()).collect();
        let m = view.active.len();
        let mut g_len = 0.0;
        let mut g_sig = 0.0;
        for p in 0..m {
            let mut row_sum = 0.0;
            for q in 0..m {
                let aka = gains[p] * gains[q] * k[(p, q)];
                let wpq = w[(p, q)];
                g_len += wpq * gains[p] * gains[q] * d_len[(p, q)];
                g_sig += wpq * aka;
                row_sum += wpq * aka;
            }
            let i = view.active[p];
            let s2 = hp.noise.variance(i);
            grad[a0 + i] += row_sum + alpha[p] * gains[p] * view.offset;
            grad[eta0 + i] += w[(p, p)] * s2;
            grad[2] += w[(p, p)] * s2;
        }
        grad[0] += 0.5 * g_len;
        grad[1] += g_sig;
    }
    Ok((value, grad))
}

/// Log posterior of the gains alone, with kernel and noise held fixed. Caches
/// the per-profile kernel matrices; differs from [`log_marginal_posterior`]
/// only by the constant η prior.
#[derive(Debug, Clone)]
pub struct FactorPosterior {
    views: Vec<ProfileView>,
    kernels: Vec<DMatrix<f64>>,
    hp: HyperParams,
    factor_scale: f64,
}

impl FactorPosterior {
    pub fn new(ps: &ProfileSet, hp: &HyperParams, pr: &Priors) -> Result<Self> {
        check_set(ps, hp)?;
        let views = ProfileView::all(ps);
        let kernels =
            views.iter().map(|v| rbf_matrix(&v.positions, &v.positions, &hp.kernel)).collect::<Result<Vec<_>>>()?;
        Ok(Self { views, kernels, hp: hp.clone(), factor_scale: pr.factor_scale })
    }

    pub fn n_channels(&self) -> usize {
        self.hp.n_channels()
    }

    /// Returns `-∞` when a covariance cannot be factored.
    pub fn log_density(&self, log_a: &[f64]) -> f64 {
        let mut hp = self.hp.clone();
        hp.factors.log_a.copy_from_slice(log_a);
        let mut total: f64 = log_a.iter().map(|&l| log_normal_density(l, self.factor_scale)).sum();
        for (view, k) in self.views.iter().zip(&self.kernels) {
            let c = match cov_from_kernel(k, &hp, &view.active) {
                Ok(c) => c,
                Err(_) => return f64::NEG_INFINITY,
            };
            match gaussian_log_density(&view.residual(log_a), &c) {
                Ok(v) => total += v,
                Err(_) => return f64::NEG_INFINITY,
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_relative_eq;

    fn random_hp(st: &mut Stream, n: usize) -> HyperParams {
        HyperParams {
            kernel: KernelParams::new(0.3 + 0.4 * st.uniform(), 0.7 + 0.8 * st.uniform()),
            noise: NoiseParams {
                log_sigma_base: (0.1 + 0.2 * st.uniform()).ln(),
                log_eta: (0..n).map(|_| 0.3 * st.normal()).collect(),
                hyper_scale: 0.5,
            },
            factors: CalibrationFactors { log_a: (0..n).map(|_| 0.1 * st.normal()).collect() },
        }
    }

    fn random_set(st: &mut Stream, n: usize, m: usize) -> ProfileSet {
        let positions = (0..n).map(|i| i as f64 / (n - 1) as f64 + 0.01 * st.uniform()).collect();
        let data = DMatrix::from_fn(n, m, |_, _| st.normal());
        ProfileSet::new(positions, data).unwrap()
    }

    fn priors() -> Priors {
        Priors {
            factor_scale: 0.1,
            noise_hyper_scale: 0.5,
            length_scale_bounds: (-5.0, 3.0),
            signal_bounds: (-5.0, 3.0),
            base_noise_bounds: (-8.0, 2.0),
        }
    }

    // Dense oracle: explicit determinant and inverse.
    fn brute_force(r: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
        let inv = c.clone().try_inverse().unwrap();
        -0.5 * (r.transpose() * inv * r)[(0, 0)] - 0.5 * c.determinant().ln() - 0.5 * r.len() as f64 * LN_2PI
    }

    #[test]
    fn scalar_density() {
        let v = gaussian_log_density(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_relative_eq!(v, -0.918_938_533_204_672_8, max_relative = 1e-9);
    }

    #[test]
    fn observed_cov_cases() {
        let mut hp = random_hp(&mut Stream::new(2), 3);
        hp.factors = CalibrationFactors::identity(3);
        hp.noise.log_sigma_base = f64::NEG_INFINITY;
        let xs = [0.0, 0.4, 0.9];
        let c = observed_cov(&xs, &hp, &[0, 1, 2]).unwrap();
        let k = rbf_matrix(&xs, &xs, &hp.kernel).unwrap();
        assert_relative_eq!(c, k, max_relative = 1e-15);

        let hp = random_hp(&mut Stream::new(3), 3);
        let c = observed_cov(&[0.2], &hp, &[1]).unwrap();
        let a = hp.factors.log_a[1].exp();
        assert_relative_eq!(c[(0, 0)], a * a * hp.kernel.signal_var() + hp.noise.variance(1), max_relative = 1e-14);
        assert!(observed_cov(&[], &hp, &[]).is_err());
    }

    #[test]
    fn observed_cov_positive_definite() {
        let mut st = Stream::new(5);
        let hp = random_hp(&mut st, 5);
        let xs: Vec<f64> = (0..5).map(|i| i as f64 * 0.2).collect();
        let c = observed_cov(&xs, &hp, &[0, 1, 2, 3, 4]).unwrap();
        assert_relative_eq!(c.clone(), c.transpose(), max_relative = 1e-15);
        assert!(c.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn likelihood_matches_dense_oracle() {
        let mut st = Stream::new(11);
        for _ in 0..20 {
            let n = 3 + (st.uniform() * 6.0) as usize;
            let ps = random_set(&mut st, n, 2);
            let hp = random_hp(&mut st, n);
            let got = log_marginal_likelihood(&ps, &hp).unwrap();
            let mut want = 0.0;
            for j in 0..2 {
                let c = observed_cov(&ps.positions, &hp, &(0..n).collect::<Vec<_>>()).unwrap();
                want += brute_force(&DVector::from_column_slice(ps.data.column(j).as_slice()), &c);
            }
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn jitter_level_barely_matters_when_well_conditioned() {
        let mut st = Stream::new(13);
        for _ in 0..10 {
            let ps = random_set(&mut st, 6, 1);
            let hp = random_hp(&mut st, 6);
            let c = observed_cov(&ps.positions, &hp, &(0..6).collect::<Vec<_>>()).unwrap();
            let ev = c.symmetric_eigenvalues();
            assert!(ev.max() / ev.min() < 1e6);
            // Residuals drawn from the model itself.
            let l = c.clone().cholesky().unwrap().l();
            let r = l * DVector::from_vec(st.normals(6));
            let a = gaussian_log_density_jittered(&r, &c, 1e-10).unwrap();
            let b = gaussian_log_density_jittered(&r, &c, 1e-9).unwrap();
            assert!((a - b).abs() < 1e-6, "{a} vs {b}, cond {}", ev.max() / ev.min());
        }
    }

    #[test]
    fn gain_amplitude_degeneracy() {
        let mut st = Stream::new(17);
        let ps = random_set(&mut st, 5, 2);
        let mut hp = random_hp(&mut st, 5);
        hp.noise.log_sigma_base = (1e-3f64).ln();
        let base = log_marginal_likelihood(&ps, &hp).unwrap();
        let c = 2.0f64;
        let mut scaled = hp.clone();
        scaled.factors.log_a.iter_mut().for_each(|l| *l += c.ln());
        scaled.kernel.log_signal_sigma -= c.ln();
        let moved = log_marginal_likelihood(&ps, &scaled).unwrap();
        assert!((base - moved).abs() < 1e-8 * base.abs().max(1.0), "{base} vs {moved}");
    }

    #[test]
    fn posterior_adds_prior_at_origin() {
        let mut st = Stream::new(19);
        let ps = random_set(&mut st, 4, 1);
        let mut hp = random_hp(&mut st, 4);
        hp.factors = CalibrationFactors::identity(4);
        hp.noise.log_eta = vec![0.0; 4];
        let pr = priors();
        let lik = log_marginal_likelihood(&ps, &hp).unwrap();
        let post = log_marginal_posterior(&ps, &hp, &pr).unwrap();
        let want = lik - 4.0 * (2.0 * std::f64::consts::PI * pr.factor_scale * pr.noise_hyper_scale).ln();
        assert_relative_eq!(post, want, max_relative = 1e-12);

        hp.kernel.log_length_scale = pr.length_scale_bounds.0 - 0.1;
        assert_eq!(log_marginal_posterior(&ps, &hp, &pr).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_only_mode_at_unit_gain() {
        let ps = ProfileSet::new(vec![0.0, 1.0, 2.0], DMatrix::zeros(3, 0)).unwrap();
        let mut hp = random_hp(&mut Stream::new(23), 3);
        let pr = priors();
        hp.factors = CalibrationFactors::identity(3);
        let at_zero = log_marginal_posterior(&ps, &hp, &pr).unwrap();
        for shift in [-0.05, 0.05] {
            let mut moved = hp.clone();
            moved.factors.log_a[1] = shift;
            assert!(log_marginal_posterior(&ps, &moved, &pr).unwrap() < at_zero);
        }
        let g = grad_log_marginal_posterior(&ps, &hp, &pr).unwrap();
        assert!(g[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fully_masked_channel_has_prior_only_gradient() {
        let mut st = Stream::new(29);
        let mut ps = random_set(&mut st, 6, 2);
        ps.offsets = vec![0.7, -0.3];
        for j in 0..2 {
            ps.mask[(2, j)] = false;
        }
        let mut hp = random_hp(&mut st, 6);
        hp.noise.log_eta[2] = 0.0;
        let g = grad_log_marginal_posterior(&ps, &hp, &priors()).unwrap();
        assert_eq!(g[3 + 2], 0.0);
    }

    #[test]
    fn factor_posterior_matches_full_posterior_up_to_constant() {
        let mut st = Stream::new(31);
        let mut ps = random_set(&mut st, 5, 3);
        ps.offsets = vec![1.0, 2.0, -0.5];
        let hp = random_hp(&mut st, 5);
        let pr = priors();
        let fp = FactorPosterior::new(&ps, &hp, &pr).unwrap();
        let base_full = log_marginal_posterior(&ps, &hp, &pr).unwrap();
        let base_fp = fp.log_density(&hp.factors.log_a);
        let mut moved = hp.clone();
        moved.factors.log_a = (0..5).map(|_| 0.1 * st.normal()).collect();
        let full = log_marginal_posterior(&ps, &moved, &pr).unwrap();
        let part = fp.log_density(&moved.factors.log_a);
        assert_relative_eq!(full - base_full, part - base_fp, epsilon = 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut st = Stream::new(37);
        let mut ps = random_set(&mut st, 6, 2);
        ps.offsets = vec![1.5, -0.8];
        let hp = random_hp(&mut st, 6);
        let pr = priors();
        let g = grad_log_marginal_posterior(&ps, &hp, &pr).unwrap();
        let x = hp.to_vec();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fp = log_marginal_posterior(&ps, &hp.with_vec(&xp), &pr).unwrap();
            let fm = log_marginal_posterior(&ps, &hp.with_vec(&xm), &pr).unwrap();
            let num = (fp - fm) / (2.0 * h);
            let err = (g[k] - num).abs() / num.abs().max(1e-2);
            assert!(err < 1e-5, "param {k}: analytic {} vs numeric {num}", g[k]);
        }
    }

    #[test]
    fn channel_permutation_invariance() {
        let mut st = Stream::new(41);
        let n = 5;
        let mut ps = random_set(&mut st, n, 2);
        ps.offsets = vec![0.4, 1.1];
        let hp = random_hp(&mut st, n);
        let pr = priors();
        let base = log_marginal_posterior(&ps, &hp, &pr).unwrap();
        // Reverse channel order; positions need not be sorted for the likelihood.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut ps2 = ps.clone();
        let mut hp2 = hp.clone();
        for (new, &old) in perm.iter().enumerate() {
            ps2.positions[new] = ps.positions[old];
            for j in 0..2 {
                ps2.data[(new, j)] = ps.data[(old, j)];
            }
            hp2.noise.log_eta[new] = hp.noise.log_eta[old];
            hp2.factors.log_a[new] = hp.factors.log_a[old];
        }
        let permuted = log_marginal_posterior(&ps2, &hp2, &pr).unwrap();
        assert!((base - permuted).abs() < 1e-12 * base.abs().max(1.0), "{base} vs {permuted}");
    }
}
