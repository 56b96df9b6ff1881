use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variant names double as the stable error identifiers printed by the CLI
/// and returned by the service, so renaming one is an API break.
#[derive(Debug, Error)]
pub enum Error {
    // container
    #[error("MalformedHeader: {0}")]
    MalformedHeader(String),
    #[error("OverlappingOffsets: {0}")]
    OverlappingOffsets(String),
    #[error("UnsupportedDtype: {0}")]
    UnsupportedDtype(String),
    #[error("InvalidTensor: {0}")]
    InvalidTensor(String),
    #[error("NameCollision: tensor `{0}` appears more than once")]
    NameCollision(String),

    // math
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("NonFiniteInput: {0}")]
    NonFiniteInput(String),
    #[error("NonFiniteLoss: layer `{layer}` produced a non-finite loss at step {step}")]
    NonFiniteLoss { layer: String, step: usize },
    #[error("RankTooLarge: rank {rank} exceeds min(rows, cols) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("NoConvergence: {0}")]
    NoConvergence(String),

    // adapters
    #[error("NoLayersMatched: no adapter layer matches {0:?}")]
    NoLayersMatched(Vec<String>),
    #[error("MissingBaseWeight: no base weight for layer `{0}`")]
    MissingBaseWeight(String),
    #[error("InvalidAdapter: {0}")]
    InvalidAdapter(String),

    // concept bundles
    #[error("MissingNeutral: concept bundle has no `neutral` tensor")]
    MissingNeutral,
    #[error("UnevenPairs: {synonyms} synonyms but {antonyms} antonym slots")]
    UnevenPairs { synonyms: usize, antonyms: usize },
    #[error("ShapeDisagreement: {0}")]
    ShapeDisagreement(String),
    #[error("IndexOutOfRange: index {index} but K = {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("InvalidBundle: {0}")]
    InvalidBundle(String),

    // embedding service client
    #[error("ServiceUnavailable: {0}")]
    ServiceUnavailable(String),
    #[error("ProtocolError: {0}")]
    ProtocolError(String),

    #[error("InvalidConfig: `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("Io: {0}")]
    Io(#[from] io::Error),
}

/// Coarse classification used for CLI exit codes and HTTP status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn invalid_config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// The variant name, e.g. `"MalformedHeader"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::OverlappingOffsets(_) => "OverlappingOffsets",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::InvalidTensor(_) => "InvalidTensor",
            Error::NameCollision(_) => "NameCollision",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::RankTooLarge { .. } => "RankTooLarge",
            Error::NoConvergence(_) => "NoConvergence",
            Error::NoLayersMatched(_) => "NoLayersMatched",
            Error::MissingBaseWeight(_) => "MissingBaseWeight",
            Error::InvalidAdapter(_) => "InvalidAdapter",
            Error::MissingNeutral => "MissingNeutral",
            Error::UnevenPairs { .. } => "UnevenPairs",
            Error::ShapeDisagreement(_) => "ShapeDisagreement",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::InvalidBundle(_) => "InvalidBundle",
            Error::ServiceUnavailable(_) => "ServiceUnavailable",
            Error::ProtocolError(_) => "ProtocolError",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::Io(_) => "Io",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFiniteInput(_) | Error::NoConvergence(_) => {
                ErrorClass::Numerical
            }
            Error::MalformedHeader(_)
            | Error::OverlappingOffsets(_)
            | Error::UnsupportedDtype(_)
            | Error::InvalidTensor(_)
            | Error::NameCollision(_)
            | Error::ServiceUnavailable(_)
            | Error::ProtocolError(_)
            | Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }
}
