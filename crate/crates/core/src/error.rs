use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("caption has {len} tokens, need at least {min}")]
    CaptionTooShort { len: usize, min: usize },
    #[error("caption has {len} tokens, model allows at most {max}")]
    CaptionTooLong { len: usize, max: usize },
    #[error("generated caption is empty")]
    EmptyCaption,
    #[error("vocabulary needs at least {needed} non-special tokens, has {have}")]
    VocabTooSmall { needed: usize, have: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding has zero norm")]
    ZeroEmbedding,
    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("batch contains image {0} more than once")]
    DuplicateImage(u64),
    #[error("prefix of {len} positions exceeds max_len = {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("prefix must start with BOS")]
    PrefixMissingBos,
    #[error("references are required for this reward/metric{}", fmt_id(.0))]
    MissingReferences(Option<u64>),
    #[error("no prediction for image {0}")]
    MissingPrediction(u64),
    #[error("corpus needs at least 2 images for idf, got {0}")]
    CorpusTooSmall(usize),
    #[error("ids missing from {source_name}: {ids:?}")]
    IdMismatch { source_name: String, ids: Vec<u64> },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("image {0} has an empty entry")]
    EmptyEntry(u64),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_id(id: &Option<u64>) -> String {
    match id {
        Some(id) => format!(" (image {id})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
