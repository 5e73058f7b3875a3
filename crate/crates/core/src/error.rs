use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed row or column in an input file. `location` names the file,
    /// line and column where possible.
    #[error("schema violation at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("event references unknown topic `{0}`")]
    UnknownTopic(String),

    #[error(
        "insufficient pre-window for topic `{topic}`: reference year {reference_year} needs data from {needed_from}, trajectory covers {first_year}..={last_year}"
    )]
    InsufficientPreWindow {
        topic: String,
        reference_year: i32,
        needed_from: i32,
        first_year: i32,
        last_year: i32,
    },

    #[error("unknown measure `{0}`")]
    UnknownMeasure(String),

    #[error("unmatchable treated topic `{topic}`: {eligible} eligible candidates, need {required}")]
    Unmatchable {
        topic: String,
        eligible: usize,
        required: usize,
    },

    /// No assignment satisfies the balance constraints. The message names the
    /// worst-violated cell of the best assignment the solver reached.
    #[error("infeasible matching: {0}")]
    Infeasible(String),

    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("missing covariate `{column}` for topic `{topic}`")]
    MissingCovariate { topic: String, column: String },

    #[error("ground-truth spec hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
