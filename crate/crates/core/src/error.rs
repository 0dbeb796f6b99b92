use std::fmt;

use serde::Serialize;

/// One invariant violation, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Non-empty list of violations found while validating a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    Validation(Violations),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("null effect (log odds ratio is zero): no finite sample size")]
    NullEffect,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("separation in cell {cell}: weighted outcome mean is {mean}")]
    Separation { cell: String, mean: f64 },

    #[error("estimating equations did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate contrast: robust variance is {0}")]
    DegenerateContrast(f64),

    #[error("sample-size search failed: {0}")]
    SearchFailure(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors produced by a fit that failed to converge (including separation).
    pub fn is_nonconvergence(&self) -> bool {
        matches!(self, Error::Separation { .. } | Error::NonConvergence(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
