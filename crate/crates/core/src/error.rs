use thiserror::Error;

/// Errors raised across the crate.
///
/// Each variant maps to one machine-readable `kind` string so the CLI can emit
/// a stable JSON error record.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("queue unstable: mu*gamma = {rho:.6} must be below 1")]
    Unstable { rho: f64 },

    #[error("no interactions recorded in window")]
    NoInteraction,

    #[error("degenerate freshness weights")]
    DegenerateWeights,

    #[error("no recommendation: recommender weights sum to zero")]
    NoRecommendation,

    #[error("fusion singularity: both opinions are dogmatic (U = 0)")]
    FusionSingularity,

    #[error("infeasible: {needed} eligible miners needed, only {available} available")]
    Infeasible { needed: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("missing checkpoint {path}; run `blockprop train` to create it")]
    MissingCheckpoint { path: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInstance(_) => "invalid-instance",
            Error::InvalidTrajectory(_) => "invalid-trajectory",
            Error::Domain(_) => "domain",
            Error::Unstable { .. } => "stability",
            Error::NoInteraction => "no-interaction",
            Error::DegenerateWeights => "degenerate-weights",
            Error::NoRecommendation => "no-recommendation",
            Error::FusionSingularity => "fusion-singularity",
            Error::Infeasible { .. } => "infeasible",
            Error::Config(_) => "configuration",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::MissingCheckpoint { .. } => "missing-checkpoint",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Plot(_) => "plot",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
