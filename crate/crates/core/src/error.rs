use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// First node of a tape whose value contains NaN or Inf.
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    Degenerate { norm: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("tensor `{name}`: {detail}")]
    TensorMismatch { name: String, detail: String },

    #[error("insufficient {class} candidates for anchor `{anchor}`: need {need}, found {found}")]
    Insufficient {
        class: &'static str,
        anchor: String,
        need: usize,
        found: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the command line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numeric,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 1,
            Category::Data => 2,
            Category::Numeric => 3,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Numeric => "numeric",
        })
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteValue(_) | Error::Degenerate { .. } => {
                Category::Numeric
            }
            Error::Invalid(_) => Category::Usage,
            _ => Category::Data,
        }
    }
}
