use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {node} out of range for network of {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("self-loop {0} -> {0} is not allowed")]
    SelfLoop(usize),

    #[error("edge {0} -> {1} already present")]
    DuplicateEdge(usize, usize),

    #[error("edge {0} -> {1} not present")]
    MissingEdge(usize, usize),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("integration step rejected at t={t}: simplex drift {drift:e} exceeds 1e-6 (reduce dt)")]
    StepRejected { t: f64, drift: f64 },

    #[error("quasi-steady solve did not converge after {iterations} iterations (last residual {residual:e}){}", at.map(|t| format!(" at t={t}")).unwrap_or_default())]
    NonConvergence {
        iterations: usize,
        residual: f64,
        at: Option<f64>,
    },

    #[error("spectrum ambiguous: {0} eigenvalue(s) with |Re| < 1e-9 after deflation")]
    AmbiguousSpectrum(usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cost oracle failed: {0}")]
    Oracle(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{kind}/{stage}: {source}")]
    Stage {
        kind: String,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::Precondition(_)
            | Error::Parse { .. }
            | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
