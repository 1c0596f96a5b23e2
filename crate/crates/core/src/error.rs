use thiserror::Error;

/// Errors raised by the fitting library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfamError {
    /// Malformed inputs: shape mismatches, bad labels, non-finite values.
    #[error("invalid input: {0}")]
    Input(String),
    /// Invalid settings such as fewer than two arms or a bad fold count.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A cross-validation training fold lacks one of the treatment arms.
    #[error("training fold {fold} has no subjects in arm {arm}")]
    MissingArm { fold: usize, arm: usize },
    /// The value estimator found no subject whose assigned arm matches the rule.
    #[error("no test subject received the arm recommended by the rule")]
    NoOverlap,
    /// Non-finite numbers appeared during fitting.
    #[error("numerical failure in {component} at outer iteration {iteration}: {detail}")]
    Numerical {
        component: String,
        iteration: usize,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, CfamError>;
