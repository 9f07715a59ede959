use thiserror::Error;

/// Errors surfaced by the simulator and optimizer stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),

    /// A forward evaluation produced a NaN or infinity. `op_index` is the
    /// tape position of the offending operation.
    #[error("numeric fault at op {op_index} ({op}){}", fmt_context(.context))]
    NumericFault {
        op_index: usize,
        op: &'static str,
        context: String,
    },

    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sweep failed: {0}")]
    Sweep(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn fmt_context(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" in {context}")
    }
}

impl Error {
    /// Attach a context label (e.g. the variable block being updated) to a
    /// numeric fault; other errors pass through unchanged.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::NumericFault {
                op_index,
                op,
                context,
            } if context.is_empty() => Error::NumericFault {
                op_index,
                op,
                context: ctx.to_string(),
            },
            other => other,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
