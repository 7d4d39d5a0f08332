//! Few-shot class-incremental learning workbench.
//!
//! A small feature extractor is trained on a data-rich base session, then
//! novel sessions arrive with `k` shots for each of `n` new classes. Each
//! session is handled by an [`UpdateMode`](session::UpdateMode): one of the
//! five parameter-decomposition modes (`M1`..`M5`), the no-training
//! normalized-prototype method (`NONPC`), or one of the prototype ablations.
//!
//! Module map:
//!
//! - [`numcore`]: dense tensors, softmax, seeded RNG, finite differences.
//! - [`nn`]: MLP extractor with running-statistics normalization, classifiers,
//!   smoothed cross-entropy, SGD with momentum and milestone schedule.
//! - [`data`]: session plans, synthetic Gaussian classes, CSV ingestion.
//! - [`session`]: base training, novel-session updates, the full protocol.
//! - [`eval`]: accuracies, logit profiles, multi-seed aggregation.
//! - [`cli`]: configuration and the `run` / `sweep-smoothing` /
//!   `compare-modes` / `report` commands.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod numcore;
pub mod session;

pub use error::{Error, Result};
