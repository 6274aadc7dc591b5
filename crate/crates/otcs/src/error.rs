//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by coupling estimation, training, sampling, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Two points (or a point and a model) disagree on dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A construction-time invariant was violated.
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    /// A configuration file failed validation; every violated field is listed.
    #[error("config validation failed: {}", .fields.join("; "))]
    ConfigValidation { fields: Vec<String> },

    /// An operation was called in the wrong OT mode.
    #[error("operation requires {required} mode")]
    WrongMode { required: &'static str },

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite {quantity} at iteration {iteration}")]
    NonFinite { quantity: &'static str, iteration: usize },

    /// The discrete oracle was asked to solve an instance above its size cap.
    #[error("oracle instance too large: {n}x{m} exceeds cap of {cap} entries")]
    OracleCap { n: usize, m: usize, cap: usize },

    /// The discrete oracle did not reach the requested tolerance.
    #[error("oracle did not converge: residual {residual:.3e} > tol {tol:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, tol: f64, iterations: usize },

    /// Semi-supervised keypoint masses make the transport polytope empty.
    #[error("infeasible keypoints: {0}")]
    Infeasible(String),

    /// A conditional row, candidate set, or plan slice carries no mass.
    #[error("zero mass: {0}")]
    ZeroMass(String),

    /// Every source was dropped while building the compatibility table.
    #[error("empty compatibility table: {0}")]
    EmptyTable(String),

    /// A checkpoint file does not match what the caller expects.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Malformed input file.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Invalid { .. } => "invalid",
            Error::ConfigValidation { .. } => "config_validation",
            Error::WrongMode { .. } => "wrong_mode",
            Error::NonFinite { .. } => "non_finite",
            Error::OracleCap { .. } => "oracle_cap",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Infeasible(_) => "infeasible",
            Error::ZeroMass(_) => "zero_mass",
            Error::EmptyTable(_) => "empty_table",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
