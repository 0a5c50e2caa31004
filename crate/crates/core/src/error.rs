use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero-norm row {row} cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("embedding matrix is not l2-normalized")]
    NotNormalized,

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("bad container magic {0:?}, expected \"FPT1\"")]
    BadMagic([u8; 4]),

    #[error("container format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidTransform(_) => "invalid_transform",
            Error::InvalidIntrinsics(_) => "invalid_intrinsics",
            Error::InvalidCloud(_) => "invalid_cloud",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::NotNormalized => "not_normalized",
            Error::InvalidTemperature(_) => "invalid_temperature",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::BadMagic(_) => "bad_magic",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
