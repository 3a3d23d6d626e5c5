//! Training harness, verification suites and staged ablation for `rpa-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{LabError, Result};
