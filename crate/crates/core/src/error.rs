use thiserror::Error;

use crate::agent::AgentError;
use crate::bench::BenchError;
use crate::encoder::EncoderError;
use crate::flops::FlopsError;
use crate::pruning::PruneError;
use crate::vocabulary::VocabError;
use crate::worldgen::WorldError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
