use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("symbol {0:?} is not in the model vocabulary")]
    OutOfVocab(char),

    #[error("token index {0} is outside the label range 1..={1}")]
    TokenOutOfRange(usize, usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown speaker id {0:?}")]
    UnknownSpeaker(String),

    #[error("utterance stream exhausted at round {round} (needed {needed} more utterances)")]
    StreamExhausted { round: usize, needed: usize },

    #[error("hypothesis/reference length mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("checkpoint checksum mismatch (file corrupted)")]
    ChecksumMismatch,

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
