//! Attention-guided visual token pruning for multimodal transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: a small dense tensor engine with reverse-mode autodiff and
//!   a finite-difference gradient checker.
//! - [`oracle`]: synthetic multi-layer attention traces with planted token
//!   importance, layer-skipped aggregation and target extraction.
//! - [`dvtie`]: the importance estimator (hybrid high-rank / low-rank
//!   cross-attention layers), its KL + pairwise ranking objective and the
//!   AdamW training loop.
//! - [`atr`]: fixed-ratio top-k pruning and adaptive token rebalancing.
//! - [`harness`]: metrics, the FLOPs model, experiments and CSV/JSON reports.

// `!(x > 0.0)` style guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atr;
pub mod dvtie;
mod error;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod seed;
pub mod stats;

pub use atr::{PruneMask, PruneSchedule};
pub use dvtie::{DvtieConfig, DvtieModel, ImportanceScores};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Report};
pub use numerics::{Tape, Tensor, Var};
pub use oracle::{AttentionTrace, TargetAttention, TokenPartition};
