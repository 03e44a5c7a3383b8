use thiserror::Error;

/// Errors raised by the analytical model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
    #[error("degenerate population: {what} = {value}")]
    DegeneratePopulation { what: &'static str, value: f64 },
    #[error("no progress: queue {queue} has zero total departure rate")]
    NoProgress { queue: usize },
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("concurrency distribution has no mass on its support")]
    ZeroConcurrency,
    #[error("every sweep point failed to converge")]
    SweepFailed,
}

/// Errors raised while configuring or running simulations and scenarios.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised while loading, running or writing a scenario.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot summarize an empty sample")]
    EmptySample,
    #[error("scenario kind `{found}` cannot be run as `{expected}`")]
    KindMismatch { expected: String, found: String },
    #[error("writing {path}: {msg}")]
    Output { path: String, msg: String },
}
