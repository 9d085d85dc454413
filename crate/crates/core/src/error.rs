//! Error type shared by all solver components.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid expansion order M = {0}; M >= 1 required")]
    InvalidOrder(usize),

    #[error("parameter out of range: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("linear solve failed: {reason} (relative residual {residual:.3e})")]
    Linsys { reason: String, residual: f64 },

    #[error("positivity lost in cell {cell}: {what} = {value:.6e}")]
    Positivity {
        cell: usize,
        what: &'static str,
        value: f64,
    },

    #[error("opacity singularity: T = {value:.6e} in cell {cell}")]
    OpacitySingularity { cell: usize, value: f64 },

    #[error("eigenvalue iteration did not converge after {0} sweeps")]
    EigenNonConvergence(usize),

    #[error("degree {0} outside the sweep range 2..=M")]
    Degree(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;
