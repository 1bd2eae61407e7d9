use thiserror::Error;

use crate::sampler::ChainDraws;

pub type Result<T, E = MsfaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MsfaError {
    /// Malformed or inconsistent input: shapes, hyperparameters, configuration.
    #[error("input error: {0}")]
    Input(String),

    /// A factorization or decomposition failed, or a draw went non-finite.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A Gibbs chain stopped early. `partial` holds the draws retained so far
    /// when the sampler was asked to keep them.
    #[error("chain {chain} failed at iteration {iteration}: {source}")]
    ChainFailed {
        chain: usize,
        iteration: usize,
        #[source]
        source: Box<MsfaError>,
        partial: Option<Box<ChainDraws>>,
    },
}

impl MsfaError {
    pub fn input(msg: impl Into<String>) -> Self {
        MsfaError::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        MsfaError::Numerical(msg.into())
    }

    /// True when the root cause is numerical rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            MsfaError::Input(_) => false,
            MsfaError::Numerical(_) => true,
            MsfaError::ChainFailed { source, .. } => source.is_numerical(),
        }
    }
}
