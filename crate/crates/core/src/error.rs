use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite loss ({value}) {context}")]
    NonFinite { value: f64, context: String },

    #[error("degenerate firing weights: total firing mass is zero")]
    DegenerateWeights,

    #[error("firing weights are in {found} mode, operation requires {expected} mode")]
    WeightMode {
        expected: &'static str,
        found: &'static str,
    },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("context overflow: sequence of {len} exceeds window {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("cannot generate from an empty prompt")]
    EmptyPrompt,

    #[error("infeasible CTC alignment: {frames} frames cannot emit {labels} labels")]
    InfeasibleAlignment { frames: usize, labels: usize },

    #[error("target of {target} tokens is longer than the {span} available logit rows")]
    TargetTooLong { target: usize, span: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("fixture unusable: {0}")]
    FixtureUnusable(String),

    #[error("sentence leak between splits: {0:?}")]
    SplitLeak(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
