use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error(
        "ratio {ratio} removes {requested} of {tokens} tokens but at most {available} src tokens can merge"
    )]
    Ratio {
        ratio: f64,
        tokens: usize,
        requested: usize,
        available: usize,
    },

    #[error("oracle accepts at most {max} tokens, got {got}")]
    OracleTooLarge { got: usize, max: usize },

    #[error("step {step} out of range for a {steps}-step schedule")]
    Range { step: usize, steps: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot aggregate records: {0}")]
    Aggregation(String),
}
