use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Every variant carries enough context to print a single actionable line.
/// The CLI maps variants to stable category codes (see `Error::category`),
/// so scripts can match on `error[shape]: ...` style prefixes.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received a tensor whose shape does not fit the contract.
    #[error("{op}: operand `{operand}` expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        operand: &'static str,
        expected: String,
        got: String,
    },

    /// An operation received an invalid non-tensor argument.
    #[error("{op}: {message}")]
    Argument { op: &'static str, message: String },

    /// A convolution description violates the supported operation set.
    #[error("invalid convolution spec: {0}")]
    ConvSpec(String),

    /// Text that should encode a genome could not be parsed.
    #[error("genome parse error at byte {position}: {message}")]
    GenomeParse { position: usize, message: String },

    /// A genome parsed but describes an architecture outside the search space.
    #[error("invalid genome: {0}")]
    Genome(String),

    /// Configuration file or flag validation failure.
    #[error("config: {0}")]
    Config(String),

    /// Dataset generation or loading failure.
    #[error("data: {0}")]
    Data(String),

    /// A checkpoint blob or manifest is missing, corrupt, or incompatible.
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("missing {what} at {path}; run `warpsearch {command}` first")]
    MissingStage {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    /// A run directory already contains the artifact a command would write.
    #[error("run directory {path} already exists; run directories are append-only, pick a new run id")]
    RunExists { path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Image {
        context: String,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable one-word category used in CLI error lines and exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Argument { .. } => "argument",
            Error::ConvSpec(_) => "conv-spec",
            Error::GenomeParse { .. } | Error::Genome(_) => "genome",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint { .. } => "checkpoint",
            Error::MissingStage { .. } => "missing-stage",
            Error::RunExists { .. } => "run-exists",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    pub fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
        let context = context.into();
        move |source| Error::Json { context, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
