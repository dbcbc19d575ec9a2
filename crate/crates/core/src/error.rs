use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("watchdog: no trainer progress for {idle_secs:.1}s ({diagnostic})")]
    Deadlock { idle_secs: f64, diagnostic: String },

    #[error("staleness bound violated: train_version {train_version} - gen_version {gen_version} > {bound}")]
    Staleness {
        train_version: u64,
        gen_version: u64,
        bound: u64,
    },

    #[error("benchmark gate failed: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
