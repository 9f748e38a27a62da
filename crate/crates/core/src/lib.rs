#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Desk-scale RLHF pipeline on a tiny autoregressive language model.
//!
//! The crate is organized as one module per pipeline stage:
//!
//! - [`tinylm`]: fixed-context neural LM with exact gradients, sampling,
//!   Adam and a portable checkpoint format.
//! - [`data`]: prompt quality filtering, length-balanced preference
//!   curation, reward-variance prompt filtering and synthetic corpora
//!   with ground-truth reward oracles.
//! - [`reward`]: scalar reward model trained with the pairwise loss plus
//!   a score-magnitude regularizer.
//! - [`ppo`]: online PPO with reference-baseline rewards, KL shaping,
//!   a learned critic and a supervised retention loss.
//! - [`offline`]: DPO with reward-model-built pairs, and rejection
//!   sampling fine-tuning.
//! - [`eval`]: oracle-judged win rates, length reports, histograms and
//!   SVG curve export.
//! - [`planner`]: analytical data/tensor/pipeline parallelism cost model.
//!
//! Batched evaluation fans out over examples through [`par`], which uses
//! rayon when the `parallel` feature is on. Partial results are always
//! reduced in input order, so serial and parallel runs are bit-identical.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod offline;
pub mod par;
pub mod planner;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod stats;
pub mod tinylm;

pub use error::{Error, Result};
pub use tinylm::{ModelConfig, ModelParams, TokenId, TokenSeq, Vocab};
