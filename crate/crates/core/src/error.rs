use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("missing or malformed header: expected `{expected}`")]
    MissingHeader { expected: String },

    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("line {line}: {message}")]
    Misaligned { line: u64, message: String },

    #[error("line {line}: record overlaps an earlier record of user `{user}`")]
    Overlap { line: u64, user: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no heart-rate values available to build a profile")]
    NoProfile,

    #[error("unsupported window width {0} (expected one of 15, 30, 45, 60)")]
    UnsupportedWidth(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("need at least {needed} users, found {found}")]
    TooFewUsers { needed: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("misaligned series: {0}")]
    MisalignedSeries(String),

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Diverged {
        epoch: usize,
        what: String,
        /// Best parameters seen before the failure.
        last_good: Box<crate::model::ModelParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
