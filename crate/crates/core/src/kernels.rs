//! RBF latent kernel, its spatial derivatives, hyperparameter gradients,
//! the channel noise covariance and the kernel's spectral density.
//!
//! The latent kernel is `k(x, x') = σ_f² exp(-(x - x')² / (2ℓ²))`. Spectral
//! densities use the unitary-frequency convention
//! `K(τ) = ∫ S(s) exp(2πisτ) ds`, so `∫ S(s) ds = K(0)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_length_scale: f64,
    pub log_signal_sigma: f64,
}

impl KernelParams {
    pub fn new(length_scale: f64, signal_sigma: f64) -> Self {
        Self { log_length_scale: length_scale.ln(), log_signal_sigma: signal_sigma.ln() }
    }

    pub fn length_scale(&self) -> f64 {
        self.log_length_scale.exp()
    }

    pub fn signal_sigma(&self) -> f64 {
        self.log_signal_sigma.exp()
    }

    pub fn signal_var(&self) -> f64 {
        (2.0 * self.log_signal_sigma).exp()
    }
}

/// Shared noise scale `σ_b` with per-channel log offsets `η_i`, so that
/// `σ_i = σ_b · exp(η_i)`. `hyper_scale` is the prior std of the offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub log_sigma_base: f64,
    pub log_eta: Vec<f64>,
    pub hyper_scale: f64,
}

impl NoiseParams {
    pub fn uniform(sigma_base: f64, n_channels: usize, hyper_scale: f64) -> Self {
        Self { log_sigma_base: sigma_base.ln(), log_eta: vec![0.0; n_channels], hyper_scale }
    }

    pub fn n_channels(&self) -> usize {
        self.log_eta.len()
    }

    pub fn sigma(&self, channel: usize) -> f64 {
        (self.log_sigma_base + self.log_eta[channel]).exp()
    }

    pub fn variance(&self, channel: usize) -> f64 {
        (2.0 * (self.log_sigma_base + self.log_eta[channel])).exp()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.n_channels()).map(|i| self.sigma(i)).collect()
    }
}

pub fn rbf(x: f64, x2: f64, kp: &KernelParams) -> f64 {
    let tau = x - x2;
    let l = kp.length_scale();
    kp.signal_var() * (-0.5 * tau * tau / (l * l)).exp()
}

pub fn rbf_matrix(xs: &[f64], xs2: &[f64], kp: &KernelParams) -> Result<DMatrix<f64>> {
    if xs.is_empty() || xs2.is_empty() {
        return Err(Error::EmptyPositions);
    }
    Ok(DMatrix::from_fn(xs.len(), xs2.len(), |i, j| rbf(xs[i], xs2[j], kp)))
}

fn check_order(order: usize) -> Result<()> {
    if order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    Ok(())
}

/// `∂^order k(x*, x) / ∂x*^order` for a single pair.
pub fn rbf_deriv(xstar: f64, x: f64, kp: &KernelParams, order: usize) -> Result<f64> {
    check_order(order)?;
    let l2 = kp.length_scale().powi(2);
    let tau = xstar - x;
    let k0 = kp.signal_var() * (-0.5 * tau * tau / l2).exp();
    Ok(match order {
        0 => k0,
        1 => -(tau / l2) * k0,
        _ => (tau * tau / (l2 * l2) - 1.0 / l2) * k0,
    })
}

/// Cross-covariance between the `order`-th derivative process at `xstar`
/// and the latent function at each of `xs`.
pub fn rbf_cross_deriv(xstar: f64, xs: &[f64], kp: &KernelParams, order: usize) -> Result<Vec<f64>> {
    check_order(order)?;
    xs.iter().map(|&x| rbf_deriv(xstar, x, kp, order)).collect()
}

/// Covariance of the `order`-th derivative process between `x` and `x2`:
/// `∂^order_x ∂^order_x2 k(x, x2)`.
pub fn rbf_mixed_deriv(x: f64, x2: f64, kp: &KernelParams, order: usize) -> Result<f64> {
    check_order(order)?;
    let l2 = kp.length_scale().powi(2);
    let t2 = (x - x2).powi(2);
    let k0 = kp.signal_var() * (-0.5 * t2 / l2).exp();
    Ok(match order {
        0 => k0,
        1 => (1.0 / l2 - t2 / (l2 * l2)) * k0,
        _ => (3.0 / (l2 * l2) - 6.0 * t2 / (l2 * l2 * l2) + t2 * t2 / (l2 * l2 * l2 * l2)) * k0,
    })
}

/// Covariance between the `p`-th derivative of the latent process at `x` and
/// its `q`-th derivative at `x2`, for `p, q ≤ 2`.
pub fn rbf_derivative_cov(x: f64, x2: f64, kp: &KernelParams, p: usize, q: usize) -> Result<f64> {
    check_order(p)?;
    check_order(q)?;
    let l = kp.length_scale();
    let u = (x - x2) / l;
    // n-th τ-derivative of k is σ² (-1)^n ℓ^-n He_n(u) exp(-u²/2); ∂/∂x2 = -∂/∂τ.
    let n = p + q;
    let hermite = match n {
        0 => 1.0,
        1 => u,
        2 => u * u - 1.0,
        3 => u * u * u - 3.0 * u,
        _ => u.powi(4) - 6.0 * u * u + 3.0,
    };
    let sign = if (n + q).is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(sign * kp.signal_var() * l.powi(-(n as i32)) * hermite * (-0.5 * u * u).exp())
}

/// Prior variance of the `order`-th derivative of the latent process.
pub fn deriv_prior_var(order: usize, kp: &KernelParams) -> Result<f64> {
    rbf_mixed_deriv(0.0, 0.0, kp, order)
}

/// `(∂K/∂log ℓ, ∂K/∂log σ_f)` for `K = rbf_matrix(xs, xs)`.
pub fn rbf_hyper_grads(xs: &[f64], kp: &KernelParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = rbf_matrix(xs, xs, kp)?;
    let l2 = kp.length_scale().powi(2);
    let d_len = DMatrix::from_fn(xs.len(), xs.len(), |i, j| {
        let t = xs[i] - xs[j];
        k[(i, j)] * t * t / l2
    });
    let d_sig = &k * 2.0;
    Ok((d_len, d_sig))
}

/// Diagonal noise covariance over the `active` channels.
pub fn noise_cov(np: &NoiseParams, active: &[usize]) -> Result<DMatrix<f64>> {
    let n = np.n_channels();
    if let Some(&bad) = active.iter().find(|&&i| i >= n) {
        return Err(Error::ChannelOutOfRange { index: bad, n_channels: n });
    }
    let mut m = DMatrix::zeros(active.len(), active.len());
    for (k, &i) in active.iter().enumerate() {
        m[(k, k)] = np.variance(i);
    }
    Ok(m)
}

/// `S(s) = σ_f² √(2π) ℓ exp(-2π²ℓ²s²)`.
pub fn rbf_spectral_density(s: f64, kp: &KernelParams) -> f64 {
    let l = kp.length_scale();
    let pi = std::f64::consts::PI;
    kp.signal_var() * (2.0 * pi).sqrt() * l * (-2.0 * pi * pi * l * l * s * s).exp()
}

/// Spectral density of white noise with standard deviation `sigma`: flat at `σ²`.
pub fn white_spectral_density(_s: f64, sigma: f64) -> f64 {
    sigma * sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> KernelParams {
        KernelParams::new(1.0, 1.0)
    }

    // Central finite difference of `f` at `x`, step `h`, derivative order 1 or 2.
    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64, order: usize) -> f64 {
        match order {
            1 => (f(x + h) - f(x - h)) / (2.0 * h),
            2 => (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h),
            _ => unreachable!(),
        }
    }

    #[test]
    fn rbf_values() {
        assert_eq!(rbf(0.0, 0.0, &KernelParams::new(1.0, 2.0)), 4.0);
        let kp = KernelParams::new(0.37, 1.3);
        assert_eq!(rbf(0.3, 0.7, &kp), rbf(0.7, 0.3, &kp));
        // exp(-1/2)
        assert_relative_eq!(rbf(1.0, 0.0, &unit()), 0.606_530_659_712_633_4, max_relative = 1e-15);
    }

    #[test]
    fn rbf_matrix_shapes() {
        let kp = KernelParams::new(1.0, 1.5);
        let m = rbf_matrix(&[0.0], &[0.0], &kp).unwrap();
        assert_relative_eq!(m[(0, 0)], 2.25, max_relative = 1e-14);
        let m = rbf_matrix(&[0.0], &[0.0, 1.0], &unit()).unwrap();
        assert_relative_eq!(m[(0, 1)], 0.606_530_659_712_633_4, max_relative = 1e-14);
        assert!(matches!(rbf_matrix(&[], &[1.0], &unit()), Err(Error::EmptyPositions)));
    }

    #[test]
    fn rbf_matrix_psd() {
        let kp = KernelParams::new(0.8, 1.7);
        let xs = [0.0, 0.1, 0.5, 1.3, 2.0];
        let m = rbf_matrix(&xs, &xs, &kp).unwrap();
        let ev = m.symmetric_eigenvalues();
        assert!(ev.min() >= -1e-10 * kp.signal_var());
    }

    #[test]
    fn cross_deriv_values() {
        let kp = unit();
        let d1 = rbf_cross_deriv(0.4, &[0.4, 1.0], &kp, 1).unwrap();
        assert_eq!(d1[0], 0.0);
        let d2 = rbf_cross_deriv(0.4, &[0.4], &kp, 2).unwrap();
        assert_relative_eq!(d2[0], -1.0, max_relative = 1e-15);
        let fd2 = fd(|x| rbf(x, 0.4, &kp), 0.4, 1e-4, 2);
        assert_relative_eq!(d2[0], fd2, max_relative = 1e-6);
        let d1 = rbf_cross_deriv(1.0, &[0.0], &kp, 1).unwrap();
        let fd1 = fd(|x| rbf(x, 0.0, &kp), 1.0, 1e-6, 1);
        assert_relative_eq!(d1[0], fd1, max_relative = 1e-8);
        assert_relative_eq!(d1[0], -0.606_530_659_712_633_4, max_relative = 1e-14);
        assert!(matches!(rbf_cross_deriv(0.0, &[0.0], &kp, 3), Err(Error::UnsupportedOrder(3))));
    }

    #[test]
    fn prior_variances() {
        let kp = KernelParams::new(1.0, 1.0);
        assert_eq!(deriv_prior_var(0, &kp).unwrap(), 1.0);
        assert_relative_eq!(deriv_prior_var(1, &kp).unwrap(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(deriv_prior_var(2, &kp).unwrap(), 3.0, max_relative = 1e-15);
        let kp = KernelParams::new(0.5, 2.0);
        assert_relative_eq!(deriv_prior_var(1, &kp).unwrap(), 4.0 / 0.25, max_relative = 1e-14);
        assert_relative_eq!(deriv_prior_var(2, &kp).unwrap(), 3.0 * 4.0 / 0.0625, max_relative = 1e-14);
        assert!(deriv_prior_var(5, &kp).is_err());
    }

    // Equal-order mixed derivative at τ = 0 via finite differences in both arguments.
    #[test]
    fn prior_var_matches_mixed_finite_difference() {
        let kp = KernelParams::new(0.7, 1.2);
        let h = 1e-3 * kp.length_scale();
        let k = |a: f64, b: f64| rbf(a, b, &kp);
        let d11 = (k(h, h) - k(h, -h) - k(-h, h) + k(-h, -h)) / (4.0 * h * h);
        assert_relative_eq!(d11, deriv_prior_var(1, &kp).unwrap(), max_relative = 1e-4);
        let h = 2e-2 * kp.length_scale();
        let w = [1.0, -2.0, 1.0];
        let mut d22 = 0.0;
        for (i, wi) in w.iter().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                d22 += wi * wj * k((i as f64 - 1.0) * h, (j as f64 - 1.0) * h);
            }
        }
        d22 /= h.powi(4);
        assert_relative_eq!(d22, deriv_prior_var(2, &kp).unwrap(), max_relative = 1e-3);
    }

    #[test]
    fn derivative_cov_agrees_with_specialized_forms() {
        let kp = KernelParams::new(0.45, 1.3);
        for (x, x2) in [(0.0, 0.0), (0.3, 0.1), (-0.2, 0.5)] {
            for order in 0..=2 {
                let mixed = rbf_mixed_deriv(x, x2, &kp, order).unwrap();
                assert_relative_eq!(
                    rbf_derivative_cov(x, x2, &kp, order, order).unwrap(),
                    mixed,
                    max_relative = 1e-12,
                    epsilon = 1e-14
                );
                let cross = rbf_deriv(x, x2, &kp, order).unwrap();
                assert_relative_eq!(
                    rbf_derivative_cov(x, x2, &kp, order, 0).unwrap(),
                    cross,
                    max_relative = 1e-12,
                    epsilon = 1e-14
                );
            }
            // Symmetry of the joint covariance: cov(f^(p)(x), f^(q)(x2)) = cov(f^(q)(x2), f^(p)(x)).
            for p in 0..=2 {
                for q in 0..=2 {
                    let a = rbf_derivative_cov(x, x2, &kp, p, q).unwrap();
                    let b = rbf_derivative_cov(x2, x, &kp, q, p).unwrap();
                    assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn hyper_grads_structure_and_fd() {
        let kp = KernelParams::new(0.6, 1.4);
        let xs = [0.0, 0.2, 0.7, 1.1];
        let (dl, ds) = rbf_hyper_grads(&xs, &kp).unwrap();
        let k = rbf_matrix(&xs, &xs, &kp).unwrap();
        for i in 0..xs.len() {
            assert_eq!(dl[(i, i)], 0.0);
        }
        assert_relative_eq!(ds, k * 2.0, max_relative = 1e-15);
        let h = 1e-6;
        let kp_hi = KernelParams { log_length_scale: kp.log_length_scale + h, ..kp };
        let kp_lo = KernelParams { log_length_scale: kp.log_length_scale - h, ..kp };
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if i == j {
                    continue;
                }
                let num = (rbf(xs[i], xs[j], &kp_hi) - rbf(xs[i], xs[j], &kp_lo)) / (2.0 * h);
                assert_relative_eq!(dl[(i, j)], num, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn noise_cov_entries() {
        let np = NoiseParams::uniform(0.3, 4, 0.5);
        let m = noise_cov(&np, &[0, 1, 2, 3]).unwrap();
        assert_relative_eq!(m, DMatrix::identity(4, 4) * 0.09, max_relative = 1e-14);
        let np = NoiseParams { log_sigma_base: 0.1f64.ln(), log_eta: vec![2f64.ln(); 3], hyper_scale: 0.5 };
        let m = noise_cov(&np, &[1]).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_relative_eq!(m[(0, 0)], 0.04, max_relative = 1e-14);
        assert!(matches!(noise_cov(&np, &[3]), Err(Error::ChannelOutOfRange { index: 3, n_channels: 3 })));
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn spectral_density_at_zero_is_transform_of_kernel() {
        let kp = unit();
        // S(0) = ∫ k(τ) dτ
        let num = trapezoid(|t| rbf(t, 0.0, &kp), -40.0, 40.0, 80_000);
        assert_relative_eq!(rbf_spectral_density(0.0, &kp), num, max_relative = 1e-10);
        assert_relative_eq!(rbf_spectral_density(0.0, &kp), 2.506_628_274_631_000_5, max_relative = 1e-14);
    }

    #[test]
    fn spectral_density_integrates_to_variance() {
        let kp = KernelParams::new(0.4, 1.7);
        let total = trapezoid(|s| rbf_spectral_density(s, &kp), -20.0, 20.0, 40_000);
        assert_relative_eq!(total, kp.signal_var(), max_relative = 1e-10);
    }

    #[test]
    fn spectrum_of_sum_is_sum_of_spectra() {
        // Two stationary kernels: the transform of their sum is the sum of transforms.
        let k1 = KernelParams::new(0.4, 1.7);
        let k2 = KernelParams::new(0.05, 0.3);
        for s in [0.0, 0.3, 1.1, 2.5] {
            let num = 2.0
                * trapezoid(
                    |t| (rbf(t, 0.0, &k1) + rbf(t, 0.0, &k2)) * (2.0 * std::f64::consts::PI * s * t).cos(),
                    0.0,
                    10.0,
                    200_000,
                );
            let sum = rbf_spectral_density(s, &k1) + rbf_spectral_density(s, &k2);
            assert!((num - sum).abs() < 1e-8, "s={s}: {num} vs {sum}");
        }
        // White noise is flat at σ².
        for s in [0.0, 0.1, 5.0] {
            assert_eq!(white_spectral_density(s, 0.3), 0.3 * 0.3);
        }
    }
}
