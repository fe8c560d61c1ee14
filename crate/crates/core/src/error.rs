use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty position set")]
    EmptyPositions,
    #[error("unsupported derivative order {0} (expected 0, 1 or 2)")]
    UnsupportedOrder(usize),
    #[error("channel index {index} out of range for {n_channels} channels")]
    ChannelOutOfRange { index: usize, n_channels: usize },
    #[error("covariance not PD")]
    NotPositiveDefinite,
    #[error("underdetermined profile {profile}: {active} masked-in channels (need at least 3)")]
    UnderdeterminedProfile { profile: String, active: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid profile set: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("MAP failed: {reason}")]
    MapFailed { reason: String, best: Box<crate::likelihood::HyperParams> },
    #[error("insufficient draws: {0} (need at least 100)")]
    InsufficientDraws(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
