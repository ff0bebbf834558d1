use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image must be at least {min}x{min}, got {height}x{width}")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// The PSF's cached transfer function was built for another grid.
    /// Rebuild it with [`crate::Psf::resized`].
    #[error("OTF cached for grid {otf:?} but image is {image:?}; resize the PSF first")]
    OtfSizeMismatch { otf: (usize, usize), image: (usize, usize) },

    #[error("invalid PSF: {0}")]
    InvalidPsf(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed float container: {0}")]
    MalformedContainer(String),

    #[error("non-finite loss at step {step} (learning rate {learning_rate}): {detail}")]
    NonFiniteLoss {
        step: usize,
        learning_rate: f64,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),

    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml parse: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::NonFinite { .. } => "non_finite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::OtfSizeMismatch { .. } => "otf_size_mismatch",
            Error::InvalidPsf(_) => "invalid_psf",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::MalformedContainer(_) => "malformed_container",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::IncompatibleArchitecture(_) => "incompatible_architecture",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io(_) => "io",
            Error::Codec(_) => "image_codec",
            Error::Json(_) => "json",
            Error::TomlDe(_) => "toml_parse",
            Error::TomlSer(_) => "toml_write",
        }
    }
}
