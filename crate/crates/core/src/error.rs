use std::path::PathBuf;

use thiserror::Error;

use crate::attr_text::ParseError;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("sample {sample_id}: {source}")]
    SampleParse {
        sample_id: String,
        #[source]
        source: ParseError,
    },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid attribute labels: {0}")]
    InvalidLabels(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("text produced no tokens")]
    EmptyText,

    #[error("non-finite {term} loss ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("sample {0} has no ground-truth mask")]
    MissingGroundTruth(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed input at {location}: {message}")]
    Format { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
