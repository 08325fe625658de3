use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("configuration error: missing required column `{column}` in {file}")]
    MissingColumn { column: String, file: String },

    #[error("parse error in {file} at row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("lookup error: unknown zone id {0}")]
    UnknownZone(i64),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("anchor build error: joint maneuver class k={k} has no members")]
    EmptyClass { k: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("variant error: {0}")]
    Variant(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid",
            Error::MissingColumn { .. } => "missing_column",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Geometry(_) => "geometry",
            Error::UnknownZone(_) => "unknown_zone",
            Error::Labeling(_) => "labeling",
            Error::EmptyClass { .. } => "empty_class",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Variant(_) => "variant",
            Error::Usage(_) => "usage",
            Error::Evaluation(_) => "evaluation",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
