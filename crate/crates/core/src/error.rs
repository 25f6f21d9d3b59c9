//! Error type shared by every stage of the engine.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, G2gError>;

#[derive(Debug, Error)]
pub enum G2gError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<G2gError>,
    },

    #[error("class {0} already has a prototype")]
    DuplicateClass(u32),

    #[error("class {0} has no prototype in memory")]
    UnknownClass(u32),

    #[error("retrieval from an empty memory")]
    EmptyMemory,

    #[error(
        "missing augmented view for sample {index}: enable synthetic augmentation or set loss.eta = 0"
    )]
    MissingAugmentedView { index: usize },

    #[error("session {session} reuses class {class} from an earlier session")]
    SessionOverlap { session: usize, class: u32 },

    #[error("evaluation set for session {0} is empty")]
    EmptyEvaluation(usize),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: String },

    #[error("unsupported {what} version: found {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("truncated {what}: {detail}")]
    Truncated { what: &'static str, detail: String },

    #[error("non-finite loss at perturbed coordinate {param}[{index}]")]
    GradientCheck { param: String, index: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl G2gError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        G2gError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        G2gError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
