use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// exp() argument exceeded the representable range; carries the dot
    /// product that produced it.
    #[error("exp overflow: dot product {dot} (shifted argument {arg})")]
    ExpOverflow { dot: f64, arg: f64 },

    /// The linear-domain accumulator collapsed to zero or went negative,
    /// which means either underflow or classes were never accumulated.
    #[error("non-positive partial sum {value}")]
    NonPositivePartialSum { value: f64 },

    #[error("row {row}: accumulated {seen} of {expected} classes before refresh")]
    IncompleteAccumulation { row: usize, seen: u32, expected: u32 },

    #[error("token integrity violated: {0}")]
    TokenIntegrity(String),

    #[error("checkpoint is malformed: {0}")]
    Checkpoint(String),

    /// Wraps a numeric failure with the worker/class/row it occurred in.
    #[error("worker {worker}{}{}: {source}",
        class.map(|k| format!(", class {k}")).unwrap_or_default(),
        row.map(|i| format!(", row {i}")).unwrap_or_default())]
    InWorker {
        worker: usize,
        class: Option<usize>,
        row: Option<usize>,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_worker(self, worker: usize, class: Option<usize>, row: Option<usize>) -> Error {
        Error::InWorker {
            worker,
            class,
            row,
            source: Box::new(self),
        }
    }

    /// True for failures of floating-point computation as opposed to bad
    /// inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::ExpOverflow { .. }
            | Error::NonPositivePartialSum { .. }
            | Error::IncompleteAccumulation { .. } => true,
            Error::InWorker { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
