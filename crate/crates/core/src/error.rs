use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid feature catalog: {0}")]
    Catalog(String),

    #[error("unsupported format_version {found} (this build reads version {supported})")]
    FormatVersion { found: u64, supported: u64 },

    #[error("feature `{feature}` has no conversion from unit `{unit}`")]
    UnknownUnit { feature: String, unit: String },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("invalid aggregation config: {0}")]
    AggregationConfig(String),

    #[error("description template has no `{marker}` insertion marker")]
    TemplateInvalid { marker: &'static str },

    #[error("tokenizer `{name}` failed: {message}")]
    Tokenizer { name: String, message: String },

    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("malformed response body: {0}")]
    MalformedResponse(String),

    #[error("label `{label}` is not part of the `{task}` label schema")]
    UnknownLabel { task: String, label: String },

    #[error("invalid gold label: {0}")]
    InvalidGold(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid run config: {0}")]
    Config(String),

    #[error("optimization budget: {0}")]
    Budget(String),

    #[error("record `{id}`: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("energy meter hook failed: {0}")]
    Meter(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the id of the record being processed.
    pub fn in_record(self, id: &str) -> Self {
        match self {
            already @ Error::Record { .. } => already,
            other => Error::Record {
                id: id.to_string(),
                source: Box::new(other),
            },
        }
    }
}
