use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("expert failure rate {rate:.3} exceeds {limit:.2} ({failures}/{attempts} episodes)")]
    ExpertFailure {
        rate: f64,
        limit: f64,
        failures: usize,
        attempts: usize,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("action queue underrun at tick {tick} (chunk {chunk_id}, index {index} >= {horizon})")]
    QueueUnderrun {
        tick: usize,
        chunk_id: usize,
        index: usize,
        horizon: usize,
    },
    #[error("execution horizon violation: {0}")]
    Horizon(String),
    #[error("empty delay history")]
    EmptyHistory,
    #[error("schema version mismatch in {kind}: file has {found}, expected {expected}")]
    SchemaVersion {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("base checkpoint hash mismatch: adapter expects {expected}, base is {found}")]
    BaseHash { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("in cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_cell(self, cell: impl Into<String>) -> Self {
        Error::Cell {
            cell: cell.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { context, expected, got });
    }
    Ok(())
}
