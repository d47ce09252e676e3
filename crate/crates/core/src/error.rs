use std::io;

use thiserror::Error;

use crate::api::VertexId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// An operator received input that breaks its documented precondition,
    /// e.g. an unsorted stream fed to a merge.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("duplicate vertex id {0}")]
    DuplicateKey(VertexId),

    #[error("buffer cache exhausted: all {capacity} frames are pinned")]
    CacheExhausted { capacity: usize },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("user function failed in partition {partition} at vertex {vid}: {message}")]
    Udf {
        partition: usize,
        vid: VertexId,
        message: String,
    },

    #[error("channel closed before end of stream")]
    ChannelClosed,

    #[error("worker {worker} failed at superstep {superstep}")]
    WorkerFailure { worker: usize, superstep: u64 },

    #[error("recovery impossible: no committed checkpoint in {0}")]
    NoCheckpoint(String),

    #[error("no failure-free workers left to recover onto")]
    NoWorkers,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid job: {}", .0.join("; "))]
    Validation(Vec<String>),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }

    /// Interruption and I/O failures are retried through recovery; everything
    /// else (including user function errors) is reported to the caller as is.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, Error::Io(_) | Error::WorkerFailure { .. })
    }
}
