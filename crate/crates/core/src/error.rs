use thiserror::Error;

pub type Result<T, E = AlfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AlfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad container magic (expected \"ALF1\")")]
    BadMagic,

    #[error("unsupported container version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("container format error at offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("container checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AlfError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AlfError::Shape(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        AlfError::Format {
            offset,
            message: msg.into(),
        }
    }
}
