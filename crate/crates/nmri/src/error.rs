// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nmri_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },
    #[error("archive: {0}")]
    Archive(String),
    #[error("unrecognized weight layout: {0}")]
    Layout(String),
    #[error("model `{0}` not found in the registry")]
    ModelNotFound(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("wrong model `{model}`: archive was recorded against digest {expected}, registry has {actual}")]
    WrongModel { model: String, expected: String, actual: String },
    #[error("{document} schema_version {found} is not supported (expected {expected})")]
    SchemaVersion { document: String, found: u32, expected: u32 },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Self::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    /// Stable machine-readable category for error documents.
    pub fn kind(&self) -> &'static str {
        use nmri_core::Error as C;
        match self {
            Error::Core(c) => match c {
                C::InvalidSpec(_) => "invalid_spec",
                C::NamedTensorAbsent(_) | C::Shape { .. } | C::CorruptWeights { .. } => "invalid_weights",
                C::TokenizerUnavailable | C::Tokenizer(_) => "tokenizer",
                C::SequenceTooLong { .. } | C::TokenOutOfRange { .. } | C::EmptyInput(_) => "invalid_input",
                C::InvalidSite { .. } | C::UnsupportedSite { .. } => "invalid_site",
                C::PatchShape { .. } | C::InvalidPerturbation(_) => "invalid_perturbation",
                C::Numeric(_) => "numeric",
                C::Argument(_) => "invalid_argument",
                C::DegenerateTrace { .. } => "degenerate_trace",
                C::InsufficientSites(_) => "insufficient_sites",
                C::PlanMismatch(_) => "plan_mismatch",
                C::Battery { .. } => "battery",
                C::Reference(_) => "reference",
                C::EmptyBundle => "empty_bundle",
            },
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Archive(_) => "archive",
            Error::Layout(_) => "layout",
            Error::ModelNotFound(_) | Error::NotFound(_) => "not_found",
            Error::WrongModel { .. } => "wrong_model",
            Error::SchemaVersion { .. } => "schema_version",
            Error::Usage(_) => "usage",
        }
    }
}
