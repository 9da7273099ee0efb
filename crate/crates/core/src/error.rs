use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // wav input
    #[error("malformed wav header: {0}")]
    MalformedHeader(String),
    #[error("unsupported bit depth: {bits} bits ({format}); only 16-bit integer PCM is accepted")]
    UnsupportedBitDepth { bits: u16, format: &'static str },
    #[error("unsupported channel count {0}; only mono is accepted")]
    UnsupportedChannels(u16),
    #[error("wav payload is empty")]
    EmptyPayload,

    // audio / mixing
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("{0} has zero signal power")]
    ZeroPower(&'static str),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("noise bank needs at least 2 entries, found {0}")]
    BankTooSmall(usize),
    #[error("invalid SNR range [{lo}, {hi}] dB")]
    InvalidSnrRange { lo: f64, hi: f64 },

    // features / shapes
    #[error("input of {len} samples is shorter than one frame of {frame} samples")]
    TooShort { len: usize, frame: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    // units
    #[error("only {distinct} distinct frames available for K = {k}")]
    TooFewDistinctFrames { distinct: usize, k: usize },
    #[error("layer index {index} out of range for a {depth}-layer context network")]
    LayerOutOfRange { index: usize, depth: usize },
    #[error("corpus is empty")]
    EmptyCorpus,

    // losses
    #[error("no masked valid frames to score")]
    EmptyMask,
    #[error("no valid frames to sample from")]
    EmptyPool,
    #[error("need at least 2 frames for a correlation estimate, got {0}")]
    TooFewFrames(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),

    // evaluation
    #[error("noise class '{label}' has {size} members; k = {k} needs at least k + 1")]
    ClassTooSmall { label: String, size: usize, k: usize },
    #[error("probe needs at least 2 noise classes, found {0}")]
    TooFewClasses(usize),

    // persistence
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint {0} is corrupted (checksum mismatch or truncated)")]
    Corrupted(PathBuf),
    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
