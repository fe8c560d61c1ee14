//! Two-stage inference: MAP hyperparameters, then random-walk Metropolis
//! over the log gains with everything else held at the MAP, followed by
//! posterior bands for the latent profile and its derivatives.

mod diagnostics;
mod map;
mod mcmc;
mod posterior;

pub use diagnostics::{diagnostics, effective_sample_size, split_rhat, DiagnosticsReport, ESS_WARN, RHAT_WARN};
pub use map::{fit_map, MapFit, MapSettings, SeedOutcome};
pub use mcmc::{laplace_factor, sample_factors, McmcChain, McmcConfig};
pub use posterior::{
    default_grid, latent_marginals, latent_posterior, summarize, Band, LatentPosterior, OrderBands, PosteriorSummary,
    SummaryConfig,
};

/// Paper-default mini-batch size; larger batches are accepted with a warning.
pub const DEFAULT_MINI_BATCH: usize = 6;

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    items.into_iter().map(f).collect()
}
