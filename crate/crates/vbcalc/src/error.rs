//! Crate-wide error type. Configuration problems keep their own variants so
//! the CLI can map them to a distinct exit code.

use crate::fieldexpr::{CompileError, ParseError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expression `{src}`: {err}")]
    ExprParse { src: String, err: ParseError },

    #[error("expression `{src}`: {err}")]
    ExprCompile { src: String, err: CompileError },

    #[error("point {point:?} left the chart domain at step {step}")]
    DomainExit { step: usize, point: Vec<f64> },

    #[error("metric not positive definite at {point:?}")]
    MetricNotPositive { point: Vec<f64> },

    #[error("frame condition number {cond:.3e} exceeds budget at step {step}")]
    FrameDegenerate { step: usize, cond: f64 },

    #[error("field `{0}` is not registered in the scene")]
    UnknownField(String),

    #[error("field `{name}` has kind {actual}, expected {expected}")]
    FieldKind {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }

    /// Configuration errors (rejected inputs) versus runtime aborts.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::ExprParse { .. }
                | Error::ExprCompile { .. }
                | Error::UnknownField(_)
                | Error::FieldKind { .. }
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
