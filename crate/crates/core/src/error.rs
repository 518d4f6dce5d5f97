use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reference set")]
    EmptyReference,
    #[error("empty point set")]
    EmptyPoints,
    #[error("insufficient points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("feature dim {dim} not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("no correspondences")]
    NoCorrespondences,
    #[error("degenerate correspondence set: {0} pairs")]
    DegenerateCorrespondences(usize),
    #[error("ill-conditioned correspondence set")]
    IllConditioned,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
