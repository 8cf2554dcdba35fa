use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedselError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),
    #[error("degenerate statistic: {0}")]
    DegenerateStatistic(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("summaries not comparable: {0}")]
    Comparability(String),
    #[error("numeric divergence at round {round}: {message}")]
    Divergence { round: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedselError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedselError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input (config, files, schemas).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            FedselError::Config(_)
                | FedselError::Parse { .. }
                | FedselError::Schema(_)
                | FedselError::EmptyDataset(_)
                | FedselError::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FedselError>;
