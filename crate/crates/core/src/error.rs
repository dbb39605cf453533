use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation (time out of range, bad beta, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Exhaustive enumeration would exceed the configured state limit.
    #[error("capacity exceeded: {what} needs {required} states, limit is {limit}")]
    Capacity { what: String, required: u128, limit: u64 },

    /// Inputs are individually valid but do not fit together.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The observed coordinates of a query state have zero probability under the data.
    #[error("zero-probability evidence for state {0:?}")]
    Evidence(Vec<u32>),

    #[error("non-finite reward {value} at state {state:?}")]
    Reward { value: f64, state: Vec<u32> },

    /// Weights (or rates) carry no mass to normalize.
    #[error("degenerate weights: {0}")]
    Degenerate(String),

    #[error("particle {index}: {source}")]
    Particle {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
