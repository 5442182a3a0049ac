//! Metrics, the FLOPs estimate, experiment runners and reports.

mod config;
mod experiment;
mod metrics;
mod report;

pub use config::{
    ExperimentConfig, HostModel, OracleSettings, PruneMode, PruningSettings, METRIC_COLUMNS,
};
pub use experiment::{
    calibrated_atr, debias_experiment, end_to_end_experiment, evaluate_experiment, evaluate_scene,
    generate_scenes, modality_basis, scene_seed, scene_trace, summarize_scene, sweep,
    sweep_axis_path, train_estimator, train_estimator_with, SceneSummary,
};
pub use metrics::{
    flops_relative, flops_relative_schedule, flops_relative_static, layer_flops, lowest_indices,
    pruning_accuracy, FlopsDims,
};
pub use report::{
    aggregate, read_report, sidecar_path, write_report, Aggregate, GroupKey, Report, ReportRow,
    Summary, CODE_VERSION, CSV_HEADER,
};
