use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation (a probability
    /// outside (0, 1), an empty sample, a loan threshold outside (0, l)).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unseen level {level:?} for categorical field {field:?}")]
    UnseenLevel { field: String, level: String },

    #[error("row {row}, column {column:?}: {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("training aborted after epoch {epoch}: {message}")]
    Training {
        epoch: usize,
        message: String,
        epoch_losses: Vec<f64>,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub(crate) fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must lie in (0, 1), got {p}")))
    }
}
