use thiserror::Error;

/// Errors raised by the modelling, inference and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive definite in {0}")]
    NotPositiveDefinite(&'static str),

    #[error(
        "inner Newton iterations did not converge after {iterations} iterations \
         (gradient max-norm {grad_norm:.3e}, log joint {log_joint})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        log_joint: f64,
    },

    #[error(
        "negative Hessian of the log marginal is not positive definite at the mode; \
         increase the amount of data or fix the hyperparameters at the mode (order-1 grid)"
    )]
    HyperHessianNotPd,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
