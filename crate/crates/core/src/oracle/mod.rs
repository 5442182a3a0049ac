//! Synthetic attention traces with planted token importance, and the
//! layer-skipped target construction that the estimator is trained on.

mod features;
mod target;
mod trace;

pub use features::{synthesize_features, FeatureSpec, ModalityBasis, SceneFeatures};
pub use target::{
    aggregate_attention, aggregate_layers, debiased_target, extract_target,
    layer_visual_importance, layer_visual_importance_with, TargetAttention,
    VisualImportancePooling,
};
pub use trace::{generate_trace, generate_trace_with, AttentionTrace, TokenPartition, TraceShape};
