use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("story `{id}` has {found} sentences, expected 5")]
    SentenceCount { id: String, found: usize },

    #[error("duplicate story id `{0}`")]
    DuplicateStory(String),

    #[error("dialogue `{id}`: turns do not alternate human/machine starting with human (turn {turn})")]
    NonAlternating { id: String, turn: usize },

    #[error("query mode `generated` requires a draft response")]
    MissingDraft,

    #[error("length mismatch: {hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("requested top-{k} from a corpus of {n} stories")]
    KTooLarge { k: usize, n: usize },

    #[error("corpus of {n} stories is too small for candidate augmentation with K = {k} (needs 2K)")]
    CorpusTooSmall { n: usize, k: usize },

    #[error("non-finite metric value at candidate {0}")]
    NonFinite(usize),

    #[error("index fingerprint {index} does not match corpus fingerprint {corpus}")]
    FingerprintMismatch { index: String, corpus: String },

    #[error("invalid index file: {0}")]
    IndexFormat(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
