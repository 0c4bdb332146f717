use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest missing in {0}")]
    ManifestMissing(PathBuf),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("validation error{}: {field}: {message}", view.map(|v| format!(" (view {v})")).unwrap_or_default())]
    Validation {
        view: Option<usize>,
        field: String,
        message: String,
    },

    #[error("attention unavailable for pair ({query_view}, {reference_view}): {reason}")]
    AttentionUnavailable {
        query_view: usize,
        reference_view: usize,
        reason: String,
    },

    #[error("self-pair not permitted (view {0})")]
    SelfPair(usize),

    #[error("empty token set")]
    EmptyTokenSet,

    #[error("empty point set")]
    EmptyPointSet,

    #[error("{what}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("attention stack has no layers")]
    NoLayers,

    #[error("singular intrinsics")]
    SingularIntrinsics,

    #[error("need at least 2 correspondences, got {0}")]
    TooFewCorrespondences(usize),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("missing classification for view {view}, entity {entity}")]
    MissingClassification { view: usize, entity: u32 },

    #[error("missing prior mask during warm-up (iteration {0})")]
    MissingPrior(u64),

    #[error("vlm request failed{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Vlm {
        status: Option<u16>,
        message: String,
    },

    #[error("vlm request timed out after {0:?}")]
    VlmTimeout(std::time::Duration),

    #[error("no parsable verdict lines in vlm response")]
    VerdictParse,

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn validation(view: Option<usize>, field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            view,
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
