use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph error at node {node}: {detail}")]
    Graph { node: u32, detail: String },

    #[error("edge {producer}:{port} -> node {consumer}: {detail}")]
    Edge {
        producer: u32,
        port: u16,
        consumer: u32,
        detail: String,
    },

    #[error("graph contains a cycle")]
    Cycle,

    #[error("channel slot on node {node} port {port} is not covered by any coupling rule")]
    UnresolvedSlot { node: u32, port: String },

    #[error("group {group}: {detail}")]
    Group { group: usize, detail: String },

    #[error("quantizer {node}: {detail}")]
    Calibration { node: u32, detail: String },

    #[error("tensor {name} holds {value} which overflows binary16")]
    HalfOverflow { name: String, value: f32 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f32 },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),

    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn graph(node: u32, detail: impl Into<String>) -> Self {
        Error::Graph {
            node,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: alloc::boxed::Box::new(self),
        }
    }
}
