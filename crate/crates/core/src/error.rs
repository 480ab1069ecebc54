use thiserror::Error;

/// Errors shared across corpus oracles, schedules, denoisers, training and decoding.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no corpus entry is consistent with the observed tokens")]
    NoConsistentEntry,

    #[error("schedule is degenerate: alpha({0}) = 0, conditional keep probability undefined")]
    DegenerateSchedule(f64),

    #[error("loss weight diverges at t = 0")]
    DegenerateWeight,

    #[error("sequence length {got} exceeds model maximum {max}")]
    LengthExceeded { got: usize, max: usize },

    #[error("training loss became non-finite at step {0}")]
    DivergedLoss(usize),

    #[error("decoding round committed no positions")]
    PolicyStalled,

    #[error("zero joint probability has infinite perplexity")]
    ZeroProbability,

    #[error("enumeration would visit {paths} paths, over the budget of {budget}")]
    EnumerationBudget { paths: u128, budget: u64 },

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid { what, why: why.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
