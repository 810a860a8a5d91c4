use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed category name {0:?}: expected \"<object>'s <part>\"")]
    MalformedCategoryName(String),
    #[error("duplicate category {0:?}")]
    DuplicateCategory(String),
    #[error("unseen object {0:?} does not occur in any category")]
    UnknownUnseenObject(String),
    #[error("empty category list")]
    EmptyCategoryList,
    #[error("unknown object index {0}")]
    UnknownObject(usize),

    #[error("text encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kind mismatch: {0}")]
    KindMismatch(String),
    #[error("incomplete embedding bundle: {0}")]
    IncompleteBundle(String),
    #[error("channel mismatch: expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("attention mask is empty")]
    EmptyMask,
    #[error("label value {value} out of range (max {max})")]
    LabelOutOfRange { value: u32, max: usize },
    #[error("no defined classes in the requested subset")]
    NoDefinedClasses,
    #[error("class {0} absent from both prediction and ground truth")]
    ClassAbsentEverywhere(usize),

    #[error("missing file {path} (manifest row {row})")]
    MissingFile { path: PathBuf, row: usize },
    #[error("bad label value {value} in {path} (max {max})")]
    BadLabelRange { path: PathBuf, value: u32, max: usize },
    #[error("malformed manifest row {row}: {line:?}")]
    BadManifestRow { row: usize, line: String },
    #[error("empty split")]
    EmptySplit,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("cannot read checkpoint {path}: {source}")]
    CheckpointRead { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint archive: {0}")]
    CorruptArchive(String),
    #[error("checkpoint config hash {found} does not match current config {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("config error at key {key:?}: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}
