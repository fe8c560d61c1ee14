//! Seeded synthetic profile sets with known ground truth.
//!
//! Latent profiles are exact draws from the zero-mean RBF process plus a
//! constant level; channel `i` reads them through gain `a_i` and adds
//! Gaussian noise of std `σ_i`. Every random quantity comes from a
//! [`Stream`] keyed by the config seed, so output is reproducible across
//! platforms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rbf_derivative_cov, rbf_matrix, KernelParams, NoiseParams};
use crate::linalg::factor;
use crate::model::{CalibrationFactors, GroundTruth, ProfileSet};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub n_profiles: usize,
    pub position_range: (f64, f64),
    pub kernel: KernelParams,
    /// Std of the true `log a_i`.
    pub factor_scale: f64,
    /// True noise. When `log_eta` is empty the offsets are drawn from
    /// `Normal(0, hyper_scale²)`.
    pub noise: NoiseParams,
    /// Constant added to every latent profile.
    pub profile_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_channels: 24,
            n_profiles: 6,
            position_range: (0.0, 1.0),
            kernel: KernelParams::new(0.15, 1.0),
            factor_scale: 0.1,
            noise: NoiseParams { log_sigma_base: 0.08f64.ln(), log_eta: Vec::new(), hyper_scale: 0.4 },
            profile_offset: 2.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 3 {
            return Err(Error::Config("n_channels must be at least 3".into()));
        }
        if self.n_profiles < 1 {
            return Err(Error::Config("n_profiles must be at least 1".into()));
        }
        let (lo, hi) = self.position_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config("position_range needs finite lower < upper".into()));
        }
        if !(self.factor_scale >= 0.0) || !(self.noise.hyper_scale >= 0.0) {
            return Err(Error::Config("scales must be non-negative".into()));
        }
        if !self.noise.log_eta.is_empty() && self.noise.log_eta.len() != self.n_channels {
            return Err(Error::Config("noise offsets do not match n_channels".into()));
        }
        Ok(())
    }

    /// Channel positions: evenly spaced over the range, ends included.
    pub fn positions(&self) -> Vec<f64> {
        let (lo, hi) = self.position_range;
        let n = self.n_channels;
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

fn draw(cov: &DMatrix<f64>, z: &[f64]) -> Result<Vec<f64>> {
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; cov.nrows()]);
    }
    let f = factor(cov)?;
    let l = f.chol.l();
    Ok((l * DVector::from_column_slice(z)).iter().cloned().collect())
}

/// One draw from `Normal(0, K_f + jitter)` at `positions`.
pub fn sample_gp(positions: &[f64], kp: &KernelParams, seed: u64) -> Result<Vec<f64>> {
    let k = rbf_matrix(positions, positions, kp)?;
    let z = Stream::new(seed).normals(positions.len());
    draw(&k, &z)
}

/// Joint draw of `(f, f', f'')` at `positions`.
fn sample_gp_with_derivatives(positions: &[f64], kp: &KernelParams, st: &mut Stream) -> Result<[Vec<f64>; 3]> {
    let n = positions.len();
    let mut cov = DMatrix::zeros(3 * n, 3 * n);
    for p in 0..3 {
        for q in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    cov[(p * n + i, q * n + j)] = rbf_derivative_cov(positions[i], positions[j], kp, p, q)?;
                }
            }
        }
    }
    // The joint matrix is near-singular; an eigendecomposition with clipped
    // eigenvalues samples it without jitter.
    let z = DVector::from_vec(st.normals(3 * n));
    let eig = cov.symmetric_eigen();
    let scaled =
        DVector::from_iterator(3 * n, eig.eigenvalues.iter().zip(z.iter()).map(|(l, zi)| l.max(0.0).sqrt() * zi));
    let v: Vec<f64> = (&eig.eigenvectors * scaled).iter().cloned().collect();
    Ok([v[..n].to_vec(), v[n..2 * n].to_vec(), v[2 * n..].to_vec()])
}

pub fn generate(cfg: &SynthConfig) -> Result<(ProfileSet, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.n_channels;
    let m = cfg.n_profiles;
    let positions = cfg.positions();

    let mut gain_stream = Stream::new(derive_seed(cfg.seed, 0));
    let log_a: Vec<f64> = (0..n).map(|_| cfg.factor_scale * gain_stream.normal()).collect();
    let mut noise = cfg.noise.clone();
    if noise.log_eta.is_empty() {
        let mut st = Stream::new(derive_seed(cfg.seed, 1));
        noise.log_eta = (0..n).map(|_| noise.hyper_scale * st.normal()).collect();
    }

    let mut latent_stream = Stream::new(derive_seed(cfg.seed, 2));
    let mut noise_stream = Stream::new(derive_seed(cfg.seed, 3));
    let mut latents = vec![vec![0.0; m]; n];
    let mut slopes = vec![vec![0.0; m]; n];
    let mut curvatures = vec![vec![0.0; m]; n];
    let mut data = DMatrix::zeros(n, m);
    for j in 0..m {
        let [f, f1, f2] = sample_gp_with_derivatives(&positions, &cfg.kernel, &mut latent_stream)?;
        for i in 0..n {
            let latent = f[i] + cfg.profile_offset;
            latents[i][j] = latent;
            slopes[i][j] = f1[i];
            curvatures[i][j] = f2[i];
            let sigma = if noise.log_sigma_base == f64::NEG_INFINITY { 0.0 } else { noise.sigma(i) };
            let z = noise_stream.normal();
            data[(i, j)] = log_a[i].exp() * latent + sigma * z;
        }
    }

    let mut ps = ProfileSet::new(positions, data)?;
    let width = format!("{}", n - 1).len();
    ps.channel_ids = (0..n).map(|i| format!("ch{i:0width$}")).collect();
    let truth = GroundTruth {
        latents,
        slopes,
        curvatures,
        true_factors: CalibrationFactors { log_a },
        true_noise: noise,
        kernel: cfg.kernel,
    };
    Ok((ps, truth))
}
