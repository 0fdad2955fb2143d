//! Treatment-effect trees for off-policy policy evaluation.
//!
//! Given logged trajectories from a behavior policy, this crate reduces each
//! episode to an `(x0, rho, g)` record and greedily partitions the initial-state
//! feature space so that every leaf carries a group treatment effect that can be
//! estimated with confidence. Tree structure is learned on one half of the data
//! and leaf effects (with bootstrap intervals) are estimated on the other half.
//!
//! Module map:
//!
//! * [`data`]: trajectories, records, JSONL ingestion and sample splitting.
//! * [`estimators`]: the group effect estimator, ESS, variance proxy, WIS.
//! * [`loss`]: adjusted MSE, margin/ratio regularizers and the combined loss.
//! * [`tree`]: greedy recursive partitioning and tree (de)serialization.
//! * [`inference`]: per-leaf estimates, bootstrap intervals and metrics.
//! * [`envs`]: tabular MDPs, the sepsis-style surrogate and the 1-D toy process.
//! * [`harness`]: experiment configuration and the command pipelines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod envs;
pub mod estimators;
pub mod harness;
pub mod inference;
pub mod loss;
pub mod par;
pub mod seed;
pub mod tree;

pub use data::{Dataset, EvalRecord, Trajectory};
pub use loss::{LossConfig, RegMode, VarianceMode};
pub use tree::{Node, Tree};
