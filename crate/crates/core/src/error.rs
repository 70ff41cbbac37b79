use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension violation; `detail` names the offending dimensions.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Bad argument or config value outside its documented domain.
    #[error("{0}")]
    Invalid(String),

    #[error("backward needs a scalar (1-element) loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter '{0}' has no gradient; run backward before the optimizer step")]
    MissingGrad(String),

    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (rec={rec}, adv={adv}, swap={swap}, total={total})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        rec: f64,
        adv: f64,
        swap: f64,
        total: f64,
    },

    #[error("checkpoint payload checksum mismatch (stored {stored}, computed {computed})")]
    ChecksumMismatch { stored: String, computed: String },

    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint holds a {found} model, expected {expected}")]
    CheckpointKind { found: String, expected: String },

    #[error("checkpoint dtype is {found}, expected {expected}")]
    CheckpointDtype { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("image {path}: {detail}")]
    Image { path: String, detail: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed report: {0}")]
    Report(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
