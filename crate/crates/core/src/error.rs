use amc_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input is {len} bytes, limit is {limit}")]
    InputTooLarge { len: usize, limit: usize },

    #[error("movie {0:?} has no dialogue")]
    NoDialogue(String),

    #[error("duplicate movie id {0:?}")]
    DuplicateMovie(String),

    #[error("split needs {needed} movies but only {available} are usable")]
    SplitTooLarge { needed: usize, available: usize },

    #[error("character {character:?} of task {movie_id:?} has no support instance")]
    MissingClassInSupport { movie_id: String, character: String },

    #[error("no predictions to score")]
    EmptySet,

    #[error("invalid benchmark data: {0}")]
    InvalidData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
