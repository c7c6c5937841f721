use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown label {label} at line {line}")]
    UnknownLabel { line: usize, label: i64 },
    #[error("corrupt container {path}: {reason}")]
    CorruptContainer { path: PathBuf, reason: String },
    #[error("bad magic: expected {:?}, found {:?}", magic(expected), magic(found))]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("header declares {declared} payload bytes but {actual} are present")]
    HeaderPayloadSizeMismatch { declared: usize, actual: usize },
    #[error("rate mismatch: manifest says {manifest}, container says {container}")]
    FpsMismatch { manifest: f64, container: f64 },
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("sequence of {frames} frames is shorter than detrend window {window}")]
    TooShort { frames: usize, window: usize },
    #[error("no DFT bin inside band {low}..{high} Hz")]
    EmptyBand { low: f64, high: f64 },

    #[error("occlusion window at ({row}, {col}) with side {patch} exceeds {height}x{width} frame")]
    OutOfBounds {
        row: usize,
        col: usize,
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss diverged at epoch {epoch}, step {step}: {value}")]
    DivergedLoss {
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("distance list is empty")]
    EmptyDistances,
    #[error("both classes must be present")]
    SingleClass,
    #[error("region {0} does not fit inside the frame")]
    RegionOutOfBounds(String),

    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io(_) | Error::MissingFile(_) => 4,
            Error::MalformedRecord { .. }
            | Error::UnknownLabel { .. }
            | Error::CorruptContainer { .. }
            | Error::BadMagic { .. }
            | Error::HeaderPayloadSizeMismatch { .. }
            | Error::FpsMismatch { .. }
            | Error::Json(_) => 5,
            Error::Invalid(_)
            | Error::TooShort { .. }
            | Error::EmptyBand { .. }
            | Error::OutOfBounds { .. }
            | Error::ShapeMismatch(_)
            | Error::RegionOutOfBounds(_) => 6,
            Error::EmptyDataset | Error::SingleClass | Error::EmptyDistances => 7,
            Error::NonFiniteActivation(_) | Error::DivergedLoss { .. } => 8,
        }
    }
}

fn magic(bytes: &[u8; 4]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}
