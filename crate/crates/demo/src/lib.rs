//! Browser bindings. Everything crosses the boundary as JSON strings so the
//! page needs no glue beyond the generated `wasm-bindgen` module.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use selfcal::inference::{
    default_grid, fit_map, latent_marginals, sample_factors, summarize, Band, MapSettings, McmcConfig, SummaryConfig,
};
use selfcal::io::spectrum_rows;
use selfcal::kernels::KernelParams;
use selfcal::model::center_profiles;
use selfcal::synth::{generate, SynthConfig};
use selfcal::Priors;

#[derive(Serialize)]
struct GainRow {
    position: f64,
    truth: f64,
    median: f64,
    lower95: f64,
    upper95: f64,
}

#[derive(Serialize)]
struct CalibrationView {
    positions: Vec<f64>,
    /// Raw data of the shown profile.
    data: Vec<f64>,
    gains: Vec<GainRow>,
    grid: Vec<f64>,
    /// Calibrated bands, indexed by order, for the shown profile.
    bands: Vec<Band>,
    /// Same bands from the a = 1 fit (MAP mean ± 1.96 sd).
    baseline: Vec<Band>,
    /// True latent, slope and curvature at the channel positions.
    truth: [Vec<f64>; 3],
    length_scale: f64,
    signal_sigma: f64,
    noise_sigma_base: f64,
    acceptance_rate: f64,
    max_rhat: f64,
    min_ess: f64,
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Synthesize a dataset, run both stages and return gains plus bands for
/// `profile` as JSON.
pub fn calibrate_json(seed: u64, n_channels: usize, n_samples: usize, profile: usize) -> selfcal::Result<String> {
    let cfg = SynthConfig { n_channels, seed, ..SynthConfig::default() };
    let (ps, truth) = generate(&cfg)?;
    let j = profile.min(ps.n_profiles() - 1);
    let (centered, _) = center_profiles(&ps)?;
    let pr = Priors::for_profile_set(&centered);
    let map = fit_map(&centered, &pr, &MapSettings { grid_points: 5, ..MapSettings::default() })?;
    let mc = McmcConfig { n_samples, burn_in: n_samples / 5, seed, ..McmcConfig::default() };
    let chain = sample_factors(&centered, &map.theta, &pr, &mc)?;
    let grid = default_grid(&centered, 120);
    let summary = summarize(
        &centered,
        &map.theta,
        &chain,
        &grid,
        &[0, 1, 2],
        &SummaryConfig { max_samples: 400, seed, ..SummaryConfig::default() },
    )?;
    let fixed = fit_map(&centered, &pr, &MapSettings { grid_points: 5, fix_factors: true, ..MapSettings::default() })?;
    let mut baseline = Vec::new();
    for order in 0..3 {
        let (mean, var) = latent_marginals(&centered, j, &fixed.theta, &grid, order)?;
        let shift = if order == 0 { centered.offsets[j] } else { 0.0 };
        let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
        baseline.push(Band {
            median: mean.iter().map(|m| m + shift).collect(),
            lower95: mean.iter().zip(&sd).map(|(m, s)| m + shift - 1.96 * s).collect(),
            upper95: mean.iter().zip(&sd).map(|(m, s)| m + shift + 1.96 * s).collect(),
        });
    }
    let diag = chain.diagnostics();
    let column = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    let view = CalibrationView {
        positions: ps.positions.clone(),
        data: ps.data.column(j).iter().copied().collect(),
        gains: (0..ps.n_channels())
            .map(|i| GainRow {
                position: ps.positions[i],
                truth: truth.true_factors.log_a[i].exp(),
                median: chain.quantile(i, 0.5).exp(),
                lower95: chain.quantile(i, 0.025).exp(),
                upper95: chain.quantile(i, 0.975).exp(),
            })
            .collect(),
        grid,
        bands: summary.orders.iter().map(|o| o.profiles[j].clone()).collect(),
        baseline,
        truth: [column(&truth.latents), column(&truth.slopes), column(&truth.curvatures)],
        length_scale: map.theta.kernel.length_scale(),
        signal_sigma: map.theta.kernel.signal_sigma(),
        noise_sigma_base: map.theta.noise.log_sigma_base.exp(),
        acceptance_rate: chain.acceptance_rate,
        max_rhat: diag.max_rhat(),
        min_ess: diag.min_ess(),
    };
    Ok(serde_json::to_string(&view)?)
}

/// Rows `[s, S_f, S_n, S_total]` on `n` frequencies in `[0, max_freq]`.
pub fn spectrum_json(length_scale: f64, signal_sigma: f64, noise_sigma: f64, max_freq: f64, n: usize) -> String {
    let kp = KernelParams::new(length_scale, signal_sigma);
    let freqs: Vec<f64> = (0..n).map(|k| max_freq * k as f64 / (n.max(2) - 1) as f64).collect();
    serde_json::to_string(&spectrum_rows(&kp, noise_sigma, &freqs)).expect("rows serialize")
}

#[wasm_bindgen]
pub fn calibrate(seed: u32, n_channels: u32, n_samples: u32, profile: u32) -> Result<String, JsError> {
    calibrate_json(seed as u64, n_channels as usize, n_samples as usize, profile as usize).map_err(err)
}

#[wasm_bindgen]
pub fn spectrum(
    length_scale: f64,
    signal_sigma: f64,
    noise_sigma: f64,
    max_freq: f64,
    n: u32,
) -> Result<String, JsError> {
    if !(length_scale > 0.0 && signal_sigma >= 0.0 && noise_sigma >= 0.0 && max_freq > 0.0) || n == 0 {
        return Err(JsError::new("length scale and max frequency must be positive, sigmas non-negative"));
    }
    Ok(spectrum_json(length_scale, signal_sigma, noise_sigma, max_freq, n as usize))
}
