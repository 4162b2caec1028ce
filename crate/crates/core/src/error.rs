use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("channel {channel} has zero standard deviation")]
    DegenerateChannel { channel: usize },

    #[error("training diverged at epoch {epoch}, step {step} (non-finite loss)")]
    Diverged { epoch: usize, step: usize },

    #[error("backward was already run on this tape")]
    TapeConsumed,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Ppm(#[from] PpmError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Settings(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (expected magic P6)")]
    BadMagic,
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    BadMaxval(u32),
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("truncated PPM payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic (not an .nnex file)")]
    BadMagic,
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("{0} trailing bytes after initializer table")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 in {what}")]
    BadUtf8 { what: &'static str },
    #[error("unknown dtype code {code} for tensor {name}")]
    BadDtype { name: String, code: u8 },
    #[error("tensor {name}: declared payload {declared} bytes, shape implies {expected}")]
    PayloadMismatch { name: String, declared: u64, expected: u64 },
    #[error("node {node}: input {name} is neither a prior output, the graph input nor an initializer")]
    DanglingReference { node: usize, name: String },
    #[error("unsupported op {op} at node {node}")]
    UnsupportedOp { op: String, node: usize },
    #[error("node {node} ({op}): {msg}")]
    BadNode { node: usize, op: String, msg: String },
    #[error("metadata: {0}")]
    Metadata(String),
}
