use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code taxonomy:
/// 2 config, 3 missing artifact, 4 numerical failure, 5 firewall violation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {op} (op #{index}); recent ops: {trace}")]
    NonFinite {
        op: &'static str,
        index: usize,
        trace: String,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("unknown adapter language '{requested}'; registered: [{registered}]")]
    UnknownAdapter {
        requested: String,
        registered: String,
    },

    #[error("unknown parameter group '{0}'")]
    UnknownGroup(String),

    #[error("no language mean available for '{0}'")]
    MissingMean(String),

    #[error("empty corpus for language '{0}'")]
    EmptyCorpus(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    OverLength { len: usize, max: usize },

    #[error("sequence is empty after removing pad positions")]
    EmptyAfterPad,

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("zero-resource firewall violation: {0}")]
    Firewall(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact: {what} (run `{needed_command}` first)")]
    MissingArtifact {
        what: String,
        needed_command: String,
    },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Exit code class for the CLI: 0 ok, 2 config, 3 missing artifact,
    /// 4 numerical failure, 5 firewall violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } | Error::CorruptFile { .. } | Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::Diverged(_) => 4,
            Error::Firewall(_) => 5,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
