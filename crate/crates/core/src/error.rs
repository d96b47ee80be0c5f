use thiserror::Error;

use crate::catalog::CatalogError;
use crate::fd::FdError;
use crate::gram::GramError;
use crate::oracle::OracleError;
use crate::planner::PlanError;
use crate::solver::SolverError;
use crate::storage::StorageError;

/// Top-level error for the end-to-end pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Gram(#[from] GramError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, printed by the CLI next to the message.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Catalog(_) => "config",
            Error::Storage(_) => "data",
            Error::Plan(_) => "plan",
            Error::Gram(GramError::EmptyTrainingSet) => "empty-training-set",
            Error::Gram(_) => "gram",
            Error::Solver(_) => "solver",
            Error::Fd(_) => "fd",
            Error::Oracle(_) => "oracle",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for this error. Configuration problems (including a
    /// missing config file) map to 2 and an empty join maps to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Catalog(_) | Error::Io { .. } => 2,
            Error::Gram(GramError::EmptyTrainingSet) => 3,
            Error::Storage(_) => 4,
            Error::Plan(_) => 5,
            Error::Fd(_) => 6,
            Error::Solver(_) => 7,
            Error::Gram(_) => 8,
            Error::Oracle(_) => 9,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
