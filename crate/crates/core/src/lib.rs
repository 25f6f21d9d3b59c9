//! Graph-to-graph explicit memory interaction for few-shot
//! class-incremental learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`matrix`], [`tape`], [`params`], [`gradcheck`]: dense arithmetic, the
//!   reverse-mode tape every trainable component is written against, and
//!   the finite-difference oracle used to validate it.
//! - [`pipeline`]: backbone feature -> local segment features -> weighted graph.
//! - [`gnn`]: the seven graph interactors and the full feature-to-ξ map.
//! - [`memory`]: class prototypes, graph-level dissimilarity and retrieval.
//! - [`objectives`]: prototype contrastive, local decoupling and local
//!   graph contrastive losses.
//! - [`harness`]: datasets, sessions, rehearsal, training, evaluation,
//!   probes and sweeps.

mod codec;
pub mod error;
pub mod gnn;
pub mod gradcheck;
pub mod harness;
pub mod matrix;
pub mod memory;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod tape;

pub use error::{G2gError, Result};
pub use matrix::Matrix;

/// Norms below this are treated as zero by every guarded operation.
pub const NORM_EPS: f64 = 1e-12;
