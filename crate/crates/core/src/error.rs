use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {context}")]
    NumericFailure { context: String },

    #[error("preconditioner is not positive definite (r·z = {rz})")]
    PreconditionerNotSpd { rz: f64 },

    #[error("variance estimate needs at least 2 utterances, got {0}")]
    InsufficientSample(usize),

    #[error("corpus format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shard {shard}: {source}")]
    Shard {
        shard: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::NumericFailure {
            context: context.into(),
        }
    }

    /// Prefixes the context of a numeric failure, leaving other errors untouched.
    pub fn with_context(self, prefix: &str) -> Self {
        match self {
            Error::NumericFailure { context } => Error::NumericFailure {
                context: format!("{prefix}: {context}"),
            },
            Error::Shard { shard, source } => Error::Shard {
                shard,
                source: Box::new(source.with_context(prefix)),
            },
            other => other,
        }
    }

    /// True for numeric failures, including ones raised inside a shard.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFailure { .. } => true,
            Error::Shard { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
