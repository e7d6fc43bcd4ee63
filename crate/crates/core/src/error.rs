use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Schema { line: Option<usize>, message: String },

    #[error("flowchart {chart}: {kind}")]
    InvalidChart { chart: String, kind: ChartError },

    #[error("not a valid path in flowchart {chart}: {message}")]
    InvalidPath { chart: String, message: String },

    #[error("unknown node {node} in flowchart {chart}")]
    UnknownNode { chart: String, node: String },

    #[error("unknown flowchart {0}")]
    UnknownFlowchart(String),

    #[error("unknown act label {0:?}")]
    UnknownAct(String),

    #[error("path belongs to flowchart {found}, expected {expected}")]
    ForeignPath { expected: String, found: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Structural problems detected while validating a flowchart.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChartError {
    #[error("cycle detected through node {0}")]
    Cycle(String),
    #[error("action node with outgoing edge: {0}")]
    ActionWithOutgoing(String),
    #[error("unreachable node {0}")]
    Unreachable(String),
    #[error("duplicate (from, response) pair ({0}, {1})")]
    DuplicateResponse(String, String),
    #[error("decision node {0} has no outgoing edge")]
    DeadEndDecision(String),
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("edge references unknown node {0}")]
    DanglingEdge(String),
    #[error("root {0} is not a node")]
    MissingRoot(String),
    #[error("empty field {0}")]
    EmptyField(&'static str),
}

impl Error {
    pub(crate) fn schema(message: impl Into<String>) -> Self {
        Error::Schema { line: None, message: message.into() }
    }

    /// True for errors caused by bad input data rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Tensor(_) | Error::Io(_) | Error::NonFiniteLoss { .. } | Error::Checkpoint(_)
        )
    }
}
