use thiserror::Error;

/// Errors raised by the channel model, simulator, fitter and estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{function}: argument {name} = {value} is outside the domain")]
    Domain {
        function: &'static str,
        name: &'static str,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    /// A model evaluation failed inside an objective; carries the parameter
    /// vector `[beta, b1, b2, b3]` that triggered it.
    #[error("model evaluation failed at parameters {params:?}: {source}")]
    ModelAt {
        params: [f64; 4],
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate sample grid: {0}")]
    DegenerateGrid(String),

    #[error("ill-posed sample grid: {0}")]
    IllPosedGrid(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("internal fault: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(function: &'static str, name: &'static str, value: f64) -> Error {
    Error::Domain {
        function,
        name,
        value,
    }
}
