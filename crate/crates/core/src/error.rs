use thiserror::Error;

/// Errors raised anywhere in the synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("episode at slow time {slow_time} failed: {source}")]
    Episode {
        slow_time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("frequency schedule collision: {0}")]
    ScheduleCollision(String),

    #[error("invalid ES configuration: {0}")]
    InvalidConfig(String),

    #[error("measurement invalid at step {step}: J_hat = {value}")]
    MeasurementInvalid { step: usize, value: f64 },

    #[error("ES iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("gradient-flow oracle diverged at step {step}")]
    OracleDiverged { step: usize },

    #[error("riccati integration unstable at node {node}: {reason}")]
    RiccatiInstability { node: usize, reason: String },

    #[error("ill-posed synthesis: {0}")]
    IllPosedSynthesis(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short machine-readable tag used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract-violation",
            Error::IntegrationDiverged { .. } => "integration-diverged",
            Error::Episode { .. } => "episode-failed",
            Error::ScheduleCollision(_) => "schedule-collision",
            Error::InvalidConfig(_) => "invalid-config",
            Error::MeasurementInvalid { .. } => "measurement-invalid",
            Error::Iteration { .. } => "iteration-failed",
            Error::OracleDiverged { .. } => "oracle-diverged",
            Error::RiccatiInstability { .. } => "riccati-instability",
            Error::IllPosedSynthesis(_) => "ill-posed-synthesis",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
