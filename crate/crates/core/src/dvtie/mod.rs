//! Visual token importance estimator.
//!
//! Visual and text embeddings are projected to a shared width, refined by a
//! stack of hybrid compensation layers (self-attention, high-rank scaled
//! dot-product cross-attention plus a sigmoid low-rank branch, FFN) and
//! scored per token by a small MLP head.

mod config;
mod forward;
mod gradcheck;
mod loss;
mod params;
mod train;

pub use config::DvtieConfig;
pub use forward::{bind, dhct_forward, dhct_on_tape, forward_on_tape, ImportanceScores};
pub use gradcheck::{model_gradient_check, model_gradient_errors, tiny_config};
pub use loss::{
    kl_divergence, loss_breakdown, rank_loss, total_loss, total_loss_on_tape, LossBreakdown,
};
pub use params::{
    init_model, parameter_count, parameter_shapes, DhctLayerParams, DvtieModel, DvtieParams,
    HeadParams,
};
pub use train::{
    cosine_lr, evaluate, sample_value_and_grad, train, train_with_observer, AdamW, EpochSummary,
    Evaluation, Sample, TrainOutcome,
};
