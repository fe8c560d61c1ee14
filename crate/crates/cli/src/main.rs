//! `selfcal` command line.
//!
//! Exit status: 0 success, 1 error, 2 finished but the sampler did not
//! converge (split-R̂ above threshold).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfcal::io::{spectrum_rows, spectrum_to_string};
use selfcal::kernels::KernelParams;
use selfcal::pipeline::{run_derivatives, run_fit, run_pipeline, run_synth, CalibrationReport, RunConfig};
use selfcal::synth::SynthConfig;
use selfcal::{Error, Result};

#[derive(Parser)]
#[command(name = "selfcal", version, about = "Gaussian-process self-calibration of multichannel profiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (data.csv) and its ground truth (truth.json).
    Synth(SynthArgs),
    /// Stage one only: print the MAP hyperparameters as JSON.
    Fit(RunArgs),
    /// Full pipeline: MAP, MCMC over gains, bands, calibrated data.
    Calibrate(RunArgs),
    /// Recompute derivative bands from a saved chain and calibration report.
    Derivatives(DerivArgs),
    /// Spectral density of the fitted (or given) kernel plus white noise.
    Spectrum(SpectrumArgs),
}

/// Flags shared by the pipeline subcommands; each overrides the config file.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Flat TOML file with RunConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Comma-separated subset of 0,1,2.
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    /// Also report gains renormalized to geometric mean 1.
    #[arg(long)]
    renormalize_gains: bool,
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain, burn-in included.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth")]
    outdir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with SynthConfig fields (all required).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    profiles: Option<usize>,
}

#[derive(Args)]
struct DerivArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to <outdir>/chain.csv.
    #[arg(long)]
    chain: Option<PathBuf>,
    /// Defaults to <outdir>/calibration.json.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Take ℓ, σ_f and σ_b from a calibration report.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    length_scale: Option<f64>,
    #[arg(long)]
    signal_sigma: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Highest frequency; defaults to 2/ℓ.
    #[arg(long)]
    max_freq: Option<f64>,
    #[arg(long, default_value_t = 201)]
    grid_size: usize,
    /// Writes <outdir>/spectrum.csv; stdout when absent.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = v.clone();
        }
        if let Some(v) = &self.outdir {
            cfg.outdir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.grid_size {
            cfg.grid_size = v;
        }
        if let Some(v) = &self.orders {
            cfg.orders = v.clone();
        }
        if self.renormalize_gains {
            cfg.renormalize_gains = true;
        }
        if let Some(v) = self.chains {
            cfg.n_chains = v;
        }
        if let Some(v) = self.samples {
            cfg.n_samples = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if cfg.input.as_os_str().is_empty() {
            return Err(Error::Config("no input file (use --input or `input` in the config)".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_report(path: &Path) -> Result<CalibrationReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn synth(args: SynthArgs) -> Result<i32> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(n) = args.channels {
        cfg.n_channels = n;
    }
    if let Some(m) = args.profiles {
        cfg.n_profiles = m;
    }
    let (data, truth) = run_synth(&cfg, &args.outdir)?;
    println!("{}\n{}", data.display(), truth.display());
    Ok(0)
}

fn fit(args: RunArgs) -> Result<i32> {
    let cfg = args.config()?;
    let (_, fit) = run_fit(&cfg)?;
    let out = serde_json::json!({
        "length_scale": fit.theta.kernel.length_scale(),
        "signal_sigma": fit.theta.kernel.signal_sigma(),
        "noise_sigma_base": fit.theta.noise.log_sigma_base.exp(),
        "log_marginal_posterior": fit.objective,
        "grad_norm": fit.grad_norm,
        "converged": fit.converged,
        "hyperparams": fit.theta,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn calibrate(args: RunArgs) -> Result<i32> {
    let cfg = args.config()?;
    let outcome = run_pipeline(&cfg)?;
    for w in &outcome.report.diagnostics.warnings {
        log::warn!("{w}");
    }
    for p in &outcome.artifacts {
        println!("{}", p.display());
    }
    Ok(outcome.exit_code())
}

fn derivatives(args: DerivArgs) -> Result<i32> {
    let cfg = args.run.config()?;
    let chain = args.chain.unwrap_or_else(|| cfg.outdir.join("chain.csv"));
    let calibration = args.calibration.unwrap_or_else(|| cfg.outdir.join("calibration.json"));
    let summary = run_derivatives(&cfg, &chain, &calibration)?;
    for ob in &summary.orders {
        println!("{}", cfg.outdir.join(format!("posterior_order{}.csv", ob.order)).display());
    }
    Ok(0)
}

fn spectrum(args: SpectrumArgs) -> Result<i32> {
    let (mut ell, mut sf, mut sn) = (None, None, None);
    if let Some(p) = &args.calibration {
        let r = read_report(p)?;
        ell = Some(r.map.length_scale);
        sf = Some(r.map.signal_sigma);
        sn = Some(r.map.noise_sigma_base);
    }
    let ell = args.length_scale.or(ell).ok_or_else(|| Error::Config("need --length-scale or --calibration".into()))?;
    let sf = args.signal_sigma.or(sf).ok_or_else(|| Error::Config("need --signal-sigma or --calibration".into()))?;
    let sn = args.noise_sigma.or(sn).unwrap_or(0.0);
    if !(ell > 0.0 && sf >= 0.0 && sn >= 0.0) {
        return Err(Error::Config("length scale must be positive, sigmas non-negative".into()));
    }
    if args.grid_size < 1 {
        return Err(Error::Config("frequency grid is empty".into()));
    }
    let fmax = args.max_freq.unwrap_or(2.0 / ell);
    let n = args.grid_size;
    let freqs: Vec<f64> = (0..n).map(|k| if n == 1 { 0.0 } else { fmax * k as f64 / (n - 1) as f64 }).collect();
    let kp = KernelParams::new(ell, sf);
    let text = spectrum_to_string(&spectrum_rows(&kp, sn, &freqs))?;
    match args.outdir {
        Some(dir) => {
            std::fs::create_dir_all(&dir)?;
            let p = dir.join("spectrum.csv");
            std::fs::write(&p, text)?;
            println!("{}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Derivatives(a) => derivatives(a),
        Command::Spectrum(a) => spectrum(a),
    };
    match res {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
