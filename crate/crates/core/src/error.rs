use alloc::boxed::Box;
use alloc::string::String;

use crate::requant::PipelineStep;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite gradient at quadrature node {node}")]
    NonFiniteGradient { node: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("pipeline step {step} failed: {source}")]
    Step {
        step: PipelineStep,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: PipelineStep) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through pipeline step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}
