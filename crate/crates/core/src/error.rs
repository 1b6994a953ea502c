use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {max_size} cannot hold the {required} mandatory tokens")]
    VocabTooSmall { max_size: usize, required: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("identifier space of {space} sequences cannot give {users} users unique identifiers")]
    IdentifierSpaceTooSmall { space: String, users: usize },
    #[error("no unique identifier for user {user} after {retries} retries")]
    UniquenessRetriesExhausted { user: String, retries: usize },
    #[error("no username given for user {0}")]
    MissingUsername(String),
    #[error("username {0:?} is not representable in the vocabulary")]
    UnrepresentableUsername(String),
    #[error("no identifier assigned to user {0}")]
    MissingIdentifier(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("identifier of {ident} tokens x{copies} leaves no room in max_seq_len {max_seq_len}")]
    IdentifierTooLong { ident: usize, copies: usize, max_seq_len: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] uid_autodiff::AutodiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
