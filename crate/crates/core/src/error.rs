use thiserror::Error;

/// Errors raised by the pseudo-labeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("class id {class_id} outside catalog of {class_count} classes")]
    ClassOutOfRange { class_id: usize, class_count: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("length mismatch: {left} vs {right} ({context})")]
    Length {
        left: usize,
        right: usize,
        context: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite { iteration: usize, component: String },

    #[error("empty ground truth")]
    EmptyGroundTruth,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::ClassOutOfRange { .. } => "class_out_of_range",
            Error::Dimension { .. } => "dimension",
            Error::Length { .. } => "length",
            Error::Data(_) => "data",
            Error::NonFinite { .. } => "non_finite",
            Error::EmptyGroundTruth => "empty_ground_truth",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "config_parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
