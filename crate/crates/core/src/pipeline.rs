//! End-to-end runs behind the command-line subcommands.
//!
//! `calibrate` writes into its output directory:
//!
//! - `calibration.json`: MAP hyperparameters, per-channel gain median and
//!   95% interval, noise amplitudes, MCMC diagnostics;
//! - `posterior_order{k}.csv`: band files for each requested order;
//! - `calibrated.csv`: data divided by the posterior-median gains;
//! - `chain.csv`: retained `log a` draws (input to `derivatives`);
//! - `run_manifest.json`: seeds, version and the effective configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    default_grid, fit_map, sample_factors, summarize, DiagnosticsReport, MapFit, MapSettings, McmcChain, McmcConfig,
    PosteriorSummary, SummaryConfig,
};
use crate::io::{read_chain, read_profile_set, write_bands, write_chain, write_profile_set};
use crate::likelihood::{HyperParams, Priors};
use crate::model::{center_profiles, post_calibrate, CalibrationFactors, ProfileSet};
use crate::rng::derive_seed;
use crate::synth::{generate, SynthConfig};
use crate::FORMAT_VERSION;

/// Run settings. Every key has a default; a config file is a flat TOML
/// table using these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    pub outdir: PathBuf,
    pub factor_scale: f64,
    pub noise_hyper_scale: f64,
    /// Physical-unit bounds; unset bounds are derived from the data.
    pub length_scale_min: Option<f64>,
    pub length_scale_max: Option<f64>,
    pub signal_sigma_min: Option<f64>,
    pub signal_sigma_max: Option<f64>,
    pub noise_sigma_min: Option<f64>,
    pub noise_sigma_max: Option<f64>,
    pub map_grid_points: usize,
    pub map_max_iter: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub seed: u64,
    pub init_step: f64,
    pub precondition: bool,
    pub grid_size: usize,
    pub orders: Vec<usize>,
    pub draws_per_sample: usize,
    pub max_summary_samples: usize,
    pub renormalize_gains: bool,
    pub format_version: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mc = McmcConfig::default();
        let map = MapSettings::default();
        let summary = SummaryConfig::default();
        Self {
            input: PathBuf::new(),
            outdir: PathBuf::from("out"),
            factor_scale: crate::likelihood::DEFAULT_FACTOR_SCALE,
            noise_hyper_scale: crate::likelihood::DEFAULT_NOISE_HYPER_SCALE,
            length_scale_min: None,
            length_scale_max: None,
            signal_sigma_min: None,
            signal_sigma_max: None,
            noise_sigma_min: None,
            noise_sigma_max: None,
            map_grid_points: map.grid_points,
            map_max_iter: map.max_iter,
            n_samples: mc.n_samples,
            burn_in: mc.burn_in,
            thin: mc.thin,
            n_chains: mc.n_chains,
            target_accept: mc.target_accept,
            seed: mc.seed,
            init_step: mc.init_step,
            precondition: mc.precondition,
            grid_size: 200,
            orders: vec![0, 1, 2],
            draws_per_sample: summary.draws_per_sample,
            max_summary_samples: summary.max_samples,
            renormalize_gains: false,
            format_version: FORMAT_VERSION.to_string(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if self.orders.is_empty() || self.orders.iter().any(|&o| o > 2) {
            return Err(Error::Config("orders must be a non-empty subset of {0, 1, 2}".into()));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {:?} not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.mcmc().validate()
    }

    pub fn priors(&self, ps: &ProfileSet) -> Priors {
        let mut pr = Priors::for_profile_set(ps);
        pr.factor_scale = self.factor_scale;
        pr.noise_hyper_scale = self.noise_hyper_scale;
        let set = |b: &mut (f64, f64), lo: Option<f64>, hi: Option<f64>| {
            if let Some(v) = lo {
                b.0 = v.ln();
            }
            if let Some(v) = hi {
                b.1 = v.ln();
            }
        };
        set(&mut pr.length_scale_bounds, self.length_scale_min, self.length_scale_max);
        set(&mut pr.signal_bounds, self.signal_sigma_min, self.signal_sigma_max);
        set(&mut pr.base_noise_bounds, self.noise_sigma_min, self.noise_sigma_max);
        pr
    }

    pub fn map_settings(&self) -> MapSettings {
        MapSettings { grid_points: self.map_grid_points, max_iter: self.map_max_iter, ..MapSettings::default() }
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            n_samples: self.n_samples,
            burn_in: self.burn_in,
            thin: self.thin,
            n_chains: self.n_chains,
            target_accept: self.target_accept,
            seed: self.seed,
            init_step: self.init_step,
            precondition: self.precondition,
        }
    }

    /// Seed of the band Monte Carlo, derived from the run seed.
    pub fn summary_seed(&self) -> u64 {
        derive_seed(self.seed, 0x5eed_ba4d)
    }

    pub fn summary(&self) -> SummaryConfig {
        SummaryConfig {
            draws_per_sample: self.draws_per_sample,
            max_samples: self.max_summary_samples,
            seed: self.summary_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub length_scale: f64,
    pub signal_sigma: f64,
    pub noise_sigma_base: f64,
    pub log_marginal_posterior: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel_id: String,
    pub position: f64,
    pub gain_map: f64,
    pub gain_median: f64,
    pub gain_lower95: f64,
    pub gain_upper95: f64,
    /// Present when gains are renormalized to geometric mean one (per draw).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_renormalized_median: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_renormalized_lower95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_renormalized_upper95: Option<f64>,
    pub noise_sigma: f64,
    pub noise_log_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub acceptance_rate: f64,
    pub max_split_rhat: f64,
    pub min_ess: f64,
    pub split_rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub warnings: Vec<String>,
    pub converged: bool,
}

impl DiagnosticsSummary {
    fn new(chain: &McmcChain, report: &DiagnosticsReport) -> Self {
        Self {
            acceptance_rate: report.acceptance_rate,
            max_split_rhat: report.max_rhat(),
            min_ess: report.min_ess(),
            split_rhat: report.split_rhat.clone(),
            ess: report.ess.clone(),
            step_sizes: chain.step_sizes.clone(),
            warnings: report.warnings.clone(),
            converged: chain.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format_version: String,
    /// Which gain estimate `calibrated.csv` divides by.
    pub calibration_reference: String,
    pub map: MapReport,
    pub map_hyperparams: HyperParams,
    pub channels: Vec<ChannelReport>,
    pub diagnostics: DiagnosticsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: String,
    pub package_version: String,
    pub mcmc_seed: u64,
    pub chain_seeds: Vec<u64>,
    pub summary_seed: u64,
    pub input_bytes: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub map: MapFit,
    pub chain: McmcChain,
    pub summary: PosteriorSummary,
    pub report: CalibrationReport,
    pub calibrated: ProfileSet,
    pub artifacts: Vec<PathBuf>,
}

impl PipelineOutcome {
    /// Process exit status: 0 success, 2 finished but not converged.
    pub fn exit_code(&self) -> i32 {
        if self.chain.converged {
            0
        } else {
            2
        }
    }
}

/// Per-channel posterior-median gains.
pub fn median_factors(chain: &McmcChain) -> CalibrationFactors {
    CalibrationFactors { log_a: (0..chain.n_params()).map(|k| chain.quantile(k, 0.5)).collect() }
}

fn channel_reports(ps: &ProfileSet, theta: &HyperParams, chain: &McmcChain, renormalize: bool) -> Vec<ChannelReport> {
    let renorm: Option<McmcChain> = renormalize.then(|| {
        let mut c = chain.clone();
        for row in c.samples.iter_mut() {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        c
    });
    (0..ps.n_channels())
        .map(|i| ChannelReport {
            channel_id: ps.channel_ids[i].clone(),
            position: ps.positions[i],
            gain_map: theta.factors.log_a[i].exp(),
            gain_median: chain.quantile(i, 0.5).exp(),
            gain_lower95: chain.quantile(i, 0.025).exp(),
            gain_upper95: chain.quantile(i, 0.975).exp(),
            gain_renormalized_median: renorm.as_ref().map(|c| c.quantile(i, 0.5).exp()),
            gain_renormalized_lower95: renorm.as_ref().map(|c| c.quantile(i, 0.025).exp()),
            gain_renormalized_upper95: renorm.as_ref().map(|c| c.quantile(i, 0.975).exp()),
            noise_sigma: theta.noise.sigma(i),
            noise_log_offset: theta.noise.log_eta[i],
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Stage one only: fit the MAP hyperparameters of a measurement file.
pub fn run_fit(cfg: &RunConfig) -> Result<(ProfileSet, MapFit)> {
    let ps = read_profile_set(&cfg.input).map_err(|e| e.at_stage("ingest"))?;
    let (centered, _) = center_profiles(&ps).map_err(|e| e.at_stage("center"))?;
    let pr = cfg.priors(&centered);
    let fit = fit_map(&centered, &pr, &cfg.map_settings()).map_err(|e| e.at_stage("fit_map"))?;
    Ok((centered, fit))
}

/// Full two-stage calibration of `cfg.input`, writing every artifact into `cfg.outdir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let raw = read_profile_set(&cfg.input).map_err(|e| e.at_stage("ingest"))?;
    let (centered, _) = center_profiles(&raw).map_err(|e| e.at_stage("center"))?;
    let pr = cfg.priors(&centered);
    let map = fit_map(&centered, &pr, &cfg.map_settings()).map_err(|e| e.at_stage("fit_map"))?;
    let mc = cfg.mcmc();
    let chain = sample_factors(&centered, &map.theta, &pr, &mc).map_err(|e| e.at_stage("sample_factors"))?;
    let grid = default_grid(&centered, cfg.grid_size);
    let summary = summarize(&centered, &map.theta, &chain, &grid, &cfg.orders, &cfg.summary())
        .map_err(|e| e.at_stage("summarize"))?;
    let calibrated = post_calibrate(&raw, &median_factors(&chain)).map_err(|e| e.at_stage("post_calibrate"))?;

    let diag = chain.diagnostics();
    let report = CalibrationReport {
        format_version: FORMAT_VERSION.to_string(),
        calibration_reference: "posterior median".to_string(),
        map: MapReport {
            length_scale: map.theta.kernel.length_scale(),
            signal_sigma: map.theta.kernel.signal_sigma(),
            noise_sigma_base: map.theta.noise.log_sigma_base.exp(),
            log_marginal_posterior: map.objective,
            grad_norm: map.grad_norm,
            converged: map.converged,
        },
        map_hyperparams: map.theta.clone(),
        channels: channel_reports(&raw, &map.theta, &chain, cfg.renormalize_gains),
        diagnostics: DiagnosticsSummary::new(&chain, &diag),
    };

    let write = || -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&cfg.outdir)?;
        let mut paths = Vec::new();
        let p = cfg.outdir.join("calibration.json");
        write_json(&report, &p)?;
        paths.push(p);
        for &order in &cfg.orders {
            let p = cfg.outdir.join(format!("posterior_order{order}.csv"));
            write_bands(&summary, order, &p)?;
            paths.push(p);
        }
        let p = cfg.outdir.join("calibrated.csv");
        write_profile_set(&calibrated, &p)?;
        paths.push(p);
        let p = cfg.outdir.join("chain.csv");
        write_chain(&chain, &raw.channel_ids, &p)?;
        paths.push(p);
        let manifest = RunManifest {
            format_version: FORMAT_VERSION.to_string(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            mcmc_seed: mc.seed,
            chain_seeds: (0..mc.n_chains as u64).map(|c| derive_seed(mc.seed, c)).collect(),
            summary_seed: cfg.summary_seed(),
            input_bytes: std::fs::metadata(&cfg.input)?.len(),
            config: cfg.clone(),
        };
        let p = cfg.outdir.join("run_manifest.json");
        write_json(&manifest, &p)?;
        paths.push(p);
        Ok(paths)
    };
    let artifacts = write().map_err(|e| e.at_stage("write"))?;

    Ok(PipelineOutcome { map, chain, summary, report, calibrated, artifacts })
}

/// Recompute bands from a saved chain and calibration report.
pub fn run_derivatives(cfg: &RunConfig, chain_path: &Path, calibration_path: &Path) -> Result<PosteriorSummary> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let raw = read_profile_set(&cfg.input).map_err(|e| e.at_stage("ingest"))?;
    let (centered, _) = center_profiles(&raw).map_err(|e| e.at_stage("center"))?;
    let report: CalibrationReport = serde_json::from_str(&std::fs::read_to_string(calibration_path)?)
        .map_err(|e| Error::from(e).at_stage("read calibration"))?;
    let (draws, ids) = read_chain(chain_path).map_err(|e| e.at_stage("read chain"))?;
    if ids != raw.channel_ids {
        return Err(Error::Shape("chain channels differ from input channels".into()).at_stage("read chain"));
    }
    let chain = McmcChain::from_draws(draws, 0, 0, cfg.seed);
    let grid = default_grid(&centered, cfg.grid_size);
    let summary = summarize(&centered, &report.map_hyperparams, &chain, &grid, &cfg.orders, &cfg.summary())
        .map_err(|e| e.at_stage("summarize"))?;
    std::fs::create_dir_all(&cfg.outdir)?;
    for &order in &cfg.orders {
        write_bands(&summary, order, &cfg.outdir.join(format!("posterior_order{order}.csv")))
            .map_err(|e| e.at_stage("write"))?;
    }
    Ok(summary)
}

/// Write `data.csv` and `truth.json` for a synthetic set.
pub fn run_synth(cfg: &SynthConfig, outdir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (ps, truth) = generate(cfg)?;
    std::fs::create_dir_all(outdir)?;
    let data = outdir.join("data.csv");
    write_profile_set(&ps, &data)?;
    #[derive(Serialize)]
    struct TruthFile<'a> {
        format_version: &'a str,
        config: &'a SynthConfig,
        gains: Vec<f64>,
        noise_sigmas: Vec<f64>,
        truth: &'a crate::model::GroundTruth,
    }
    let truth_path = outdir.join("truth.json");
    write_json(
        &TruthFile {
            format_version: FORMAT_VERSION,
            config: cfg,
            gains: truth.true_factors.gains(),
            noise_sigmas: truth.true_noise.sigmas(),
            truth: &truth,
        },
        &truth_path,
    )?;
    Ok((data, truth_path))
}
