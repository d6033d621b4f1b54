use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate camera: projective matrix is singular")]
    DegenerateCamera,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point is at or behind the camera plane (z = {0})")]
    BehindCamera(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reduction over zero elements: {0}")]
    EmptyReduction(&'static str),
    #[error("window size {window} exceeds grid extent {extent}")]
    WindowTooLarge { window: usize, extent: usize },
    #[error("blend record belongs to pass {record} but maps come from pass {maps}")]
    StaleRecord { record: u64, maps: u64 },
    #[error("could not place object {0} after bounded retries")]
    InfeasiblePlacement(usize),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch in {path}: expected {expected}, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("quaternion for camera {camera} is not unit norm (|q| = {norm})")]
    NonUnitQuaternion { camera: usize, norm: f64 },
    #[error("label {label} out of range for {classes} classes in {path}")]
    LabelOutOfRange {
        path: PathBuf,
        label: u8,
        classes: usize,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable numeric code, distinct per variant.
    pub fn code(&self) -> u32 {
        match self {
            Error::InvalidCamera(_) => 10,
            Error::DegenerateCamera => 11,
            Error::NonPositiveDepth(_) => 12,
            Error::BehindCamera(_) => 13,
            Error::InvalidArgument(_) => 20,
            Error::NonFinite(_) => 21,
            Error::ShapeMismatch(_) => 22,
            Error::EmptyReduction(_) => 23,
            Error::WindowTooLarge { .. } => 24,
            Error::StaleRecord { .. } => 25,
            Error::InfeasiblePlacement(_) => 30,
            Error::MissingFile(_) => 40,
            Error::DimensionMismatch { .. } => 41,
            Error::NonUnitQuaternion { .. } => 42,
            Error::LabelOutOfRange { .. } => 43,
            Error::Format { .. } => 44,
            Error::Manifest(_) => 45,
            Error::Io(_) => 50,
        }
    }

    /// Errors caused by bad user input rather than by the program itself.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite(_) | Error::StaleRecord { .. })
    }
}
