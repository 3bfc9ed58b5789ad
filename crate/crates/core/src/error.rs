use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("parse error at row {row}, column `{column}`: {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("invalid resample plan (span {span}, rate {rate}) for series of length {len}")]
    Plan { span: usize, rate: usize, len: usize },

    #[error("unsupported derivative order {0}")]
    UnsupportedOrder(usize),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate metric: truth is identically zero")]
    DegenerateMetric,

    #[error("invalid weights: {0}")]
    Weight(String),

    #[error("model has not been trained")]
    NotTrained,

    #[error("no training data: {0}")]
    TrainingData(String),

    #[error("training diverged: residual {residual:.3e} exceeds 10x the initial {initial:.3e}")]
    Divergence {
        residual: f64,
        initial: f64,
        /// Lowest-residual block seen before divergence.
        best: Box<crate::pblock::PBlock>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("rollout failed at step {step}: {source}")]
    Rollout {
        step: usize,
        /// Predictions made before the failing step.
        partial: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("component {component}: {source}")]
    Component {
        component: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_component(self, component: usize) -> Self {
        Error::Component {
            component,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through component wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Component { source, .. } | Error::Rollout { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
