//! Checkpoint averaging and model selection over pools of fine-tuning runs.
//!
//! Runs are registered from a manifest, scored per split, turned into
//! per-run variant models, and compared run by run: picking the single best
//! run on source-language validation against uniformly averaging the runs'
//! weights.

pub mod averaging;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod protocol;
pub mod registry;
pub mod report;
pub mod selection;
pub mod synthgen;
pub mod tensor_store;

pub use error::{Error, Result};
pub use registry::{Run, RunPool, ScoreRecord, Split, SplitFamily};
pub use tensor_store::{Tensor, TensorMap};
