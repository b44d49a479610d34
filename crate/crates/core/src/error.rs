use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("duplicate doc_id `{0}`")]
    DuplicateDoc(String),

    #[error("instance `{utterance_id}` references unknown doc `{doc_id}`")]
    DanglingDoc { utterance_id: String, doc_id: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("document `{doc_id}`: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing retrieval result for utterance `{0}`")]
    MissingRetrieval(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("stale cache {path}: expected hash {expected}, found {found}")]
    StaleCache { path: PathBuf, expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn in_doc(self, doc_id: &str) -> Self {
        Self::Document { doc_id: doc_id.to_string(), source: Box::new(self) }
    }
}
