use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-energy {0}: ratio is undefined")]
    ZeroEnergy(&'static str),

    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("input too short: {len} samples, the encoder needs at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("a mixture needs at least one interferer or a background source")]
    NoNoiseSource,

    #[error("expected {expected} SNR values, got {got}")]
    SnrCount { expected: usize, got: usize },

    #[error("unsupported scenario: {0}")]
    Scenario(String),

    #[error("unknown source kind `{0}`")]
    UnknownSourceKind(String),

    #[error("{path}: line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("visual stream: {0}")]
    Visual(String),

    #[error("segment of {0} samples is too short, need at least 2")]
    SegmentTooShort(usize),

    #[error("missing block output: {0}")]
    MissingOutput(String),

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
