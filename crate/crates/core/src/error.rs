use thiserror::Error;

use crate::corpus::CorpusError;
use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("resume refused: {0}")]
    Resume(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
