use thiserror::Error;

/// Errors raised while constructing inputs or running the solver and simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} = {value} is outside the domain [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("interpolation matrix is numerically singular (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("quadratic program did not converge after {iterations} active-set changes")]
    QpConvergence { iterations: usize },

    #[error("QP failed at node {node} (time step {step}): {source}")]
    NodeQp {
        step: usize,
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("explicit step blew up at time step {step}, node {node} (value {value}); reduce the time step")]
    BlowUp { step: usize, node: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
