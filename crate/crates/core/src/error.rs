//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (counts, ranges, mode constraints, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor operation received incompatible shapes.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A numeric result left the finite range.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The feasible arc of a bargaining instance is empty.
    #[error("infeasible instance: {0}")]
    Infeasible(String),

    /// A record failed validation during ingestion.
    #[error("validation error at line {line}, field `{field}`: {msg}")]
    Validation {
        line: usize,
        field: String,
        msg: String,
    },

    /// Statistical test input is degenerate (e.g. all differences zero).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A checkpoint file is missing or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A file could not be parsed; `context` carries path and position.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
