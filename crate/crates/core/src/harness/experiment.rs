use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde_json::Value;

use super::config::{ExperimentConfig, PruneMode};
use super::metrics::{flops_relative_schedule, flops_relative_static, pruning_accuracy, FlopsDims};
use super::report::{Report, ReportRow};
use crate::atr::{
    atr_run_with, realized_pruning_ratio, static_prune_topk, AtrOptions, PruneMask, PruneSchedule,
};
use crate::dvtie::{
    init_model, train_with_observer, DvtieModel, EpochSummary, Sample, TrainOutcome,
};
use crate::oracle::{
    debiased_target, generate_trace_with, synthesize_features, AttentionTrace, ModalityBasis,
};
use crate::seed::{derive_seed, rng_for};
use crate::stats;
use crate::{Error, Result};

/// What an experiment keeps from a scene once its trace is dropped.
#[derive(Clone, Debug)]
pub struct SceneSummary {
    pub seed: u64,
    pub planted: Vec<f64>,
    pub sample: Sample,
    /// Text→visual attention of layers `K..L`.
    pub layer_attention: Vec<Vec<f64>>,
}

pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    derive_seed(seed, &format!("{split}-scene-{index}"))
}

pub fn scene_trace(config: &ExperimentConfig, seed: u64) -> Result<AttentionTrace> {
    let o = &config.oracle;
    generate_trace_with(
        o.partition()?,
        o.n_layers,
        o.bias_strength,
        o.noise,
        seed,
        &o.shape,
    )
}

pub fn modality_basis(config: &ExperimentConfig) -> Result<ModalityBasis> {
    ModalityBasis::new(&config.oracle.features, derive_seed(config.seed, "basis"))
}

pub fn summarize_scene(
    config: &ExperimentConfig,
    basis: &ModalityBasis,
    seed: u64,
) -> Result<SceneSummary> {
    let trace = scene_trace(config, seed)?;
    let k = config.pruning.skip_layers;
    let features = synthesize_features(&trace, &config.oracle.features, basis)?;
    let target = debiased_target(&trace, k)?;
    let layer_attention = (k..trace.n_layers())
        .map(|l| trace.text_to_visual(l))
        .collect();
    Ok(SceneSummary {
        seed,
        planted: trace.planted_importance.clone(),
        sample: Sample {
            visual: features.visual,
            text: features.text,
            target,
        },
        layer_attention,
    })
}

/// Scenes `0..count` of a split (`"train"` or `"eval"`), generated in parallel.
pub fn generate_scenes(
    config: &ExperimentConfig,
    basis: &ModalityBasis,
    split: &str,
    count: usize,
) -> Result<Vec<SceneSummary>> {
    (0..count)
        .into_par_iter()
        .map(|i| summarize_scene(config, basis, scene_seed(config.seed, split, i)))
        .collect()
}

/// Trains the estimator on the training split.
pub fn train_estimator(config: &ExperimentConfig, scenes: &[SceneSummary]) -> Result<DvtieModel> {
    Ok(train_estimator_with(config, scenes, |_, _| ControlFlow::Continue(()))?.model)
}

/// [`train_estimator`] with a per-epoch observer; also returns the loss
/// history.
pub fn train_estimator_with<F>(
    config: &ExperimentConfig,
    scenes: &[SceneSummary],
    observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochSummary, &DvtieModel) -> ControlFlow<()>,
{
    let samples: Vec<Sample> = scenes.iter().map(|s| s.sample.clone()).collect();
    let model = init_model(&config.dvtie, config.dvtie.seed)?;
    match train_with_observer(model, &samples, &config.dvtie, observer) {
        Err(e @ Error::NonFinite { sample, .. }) => {
            log::error!(
                "training diverged on scene seed {}: {e}",
                scenes[sample].seed
            );
            Err(e)
        }
        other => other,
    }
}

fn flops_dims(config: &ExperimentConfig, k: usize) -> FlopsDims {
    let o = &config.oracle;
    FlopsDims {
        n_layers: o.n_layers,
        skip_layers: k,
        n_visual: o.n_visual,
        n_text: o.n_prompt + o.n_caption,
        d_model: config.pruning.host.d_model,
        ffn_multiplier: config.pruning.host.ffn_multiplier,
    }
}

/// Runs adaptive rebalancing with the threshold multiplier bisected so the
/// realised ratio lands as close as possible to `ratio`.
pub fn calibrated_atr(
    layer_attention: &[Vec<f64>],
    target: &[f64],
    start: usize,
    total_layers: usize,
    renormalize: bool,
    ratio: f64,
) -> Result<(PruneSchedule, f64)> {
    let run = |log_scale: f64| {
        let options = AtrOptions {
            renormalize,
            threshold_scale: log_scale.exp2(),
            initial_mask: None,
        };
        atr_run_with(layer_attention, target, start, total_layers, &options)
    };
    // Larger thresholds prune later, so the realised ratio falls as the
    // multiplier grows.
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    let mut best = run(0.0)?;
    let mut best_scale = 0.0;
    let mut best_gap = (realized_pruning_ratio(&best) - ratio).abs();
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let schedule = run(mid)?;
        let realized = realized_pruning_ratio(&schedule);
        let gap = (realized - ratio).abs();
        if gap < best_gap {
            best_gap = gap;
            best_scale = mid;
            best = schedule;
        }
        if realized > ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((best, best_scale.exp2()))
}

struct RowContext<'a> {
    config: &'a ExperimentConfig,
    scene_id: usize,
    seed: u64,
    spearman: f64,
    k: usize,
}

impl RowContext<'_> {
    fn row(&self, mode: &str, ratio: f64, realized: f64, accuracy: f64, flops: f64) -> ReportRow {
        ReportRow {
            scene_id: self.scene_id,
            mode: mode.to_string(),
            ratio_requested: ratio,
            ratio_realized: realized,
            pruning_accuracy: accuracy,
            spearman: self.spearman,
            flops_relative: flops,
            k: self.k,
            lambda: self.config.dvtie.lambda,
            g: self.config.dvtie.n_dhct_layers,
            d_lowrank: self.config.dvtie.d_lowrank,
            seed: self.seed,
        }
    }
}

fn random_mask(n: usize, ratio: f64, layer: usize, seed: u64) -> PruneMask {
    let count = (ratio * n as f64).floor() as usize;
    let indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &format!("random-prune-{ratio}"));
    let mut mask = PruneMask::none(n, layer);
    for &i in indices.choose_multiple(&mut rng, count) {
        mask.bits[i] = true;
    }
    mask
}

/// Report rows of one held-out scene under every configured mode and ratio.
pub fn evaluate_scene(
    config: &ExperimentConfig,
    model: &DvtieModel,
    scene_id: usize,
    scene: &SceneSummary,
) -> Result<Vec<ReportRow>> {
    let k = config.pruning.skip_layers;
    let l = config.oracle.n_layers;
    let n = scene.planted.len();
    let scores = model.forward(&scene.sample.visual, &scene.sample.text)?;
    let ctx = RowContext {
        config,
        scene_id,
        seed: scene.seed,
        spearman: stats::spearman(&scores.raw, &scene.planted),
        k,
    };
    let dims = flops_dims(config, k);
    let mut rows = Vec::new();
    for &mode in &config.pruning.modes {
        for &ratio in &config.pruning.ratios {
            let row = match mode {
                PruneMode::Random | PruneMode::Static => {
                    let mask = if mode == PruneMode::Random {
                        random_mask(n, ratio, k, scene.seed)
                    } else {
                        static_prune_topk(&scores.raw, ratio, k)?
                    };
                    ctx.row(
                        mode.as_str(),
                        ratio,
                        mask.pruned_count() as f64 / n as f64,
                        pruning_accuracy(&mask, &scene.planted, Some(ratio))?,
                        flops_relative_static(&dims, ratio)?,
                    )
                }
                PruneMode::Adaptive => {
                    let (schedule, _) = calibrated_atr(
                        &scene.layer_attention,
                        &scores.normalized,
                        k,
                        l,
                        config.pruning.renormalize,
                        ratio,
                    )?;
                    let last = schedule.final_mask().expect("at least one pruning layer");
                    ctx.row(
                        mode.as_str(),
                        ratio,
                        realized_pruning_ratio(&schedule),
                        pruning_accuracy(last, &scene.planted, None)?,
                        flops_relative_schedule(&dims, &schedule)?,
                    )
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Generates scenes, trains the estimator on debiased targets and scores
/// every pruning mode on held-out scenes.
pub fn end_to_end_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let started = Instant::now();
    let basis = modality_basis(config)?;
    let model = {
        let train_scenes = generate_scenes(config, &basis, "train", config.oracle.n_scenes)?;
        log::info!("generated {} training scenes", train_scenes.len());
        train_estimator(config, &train_scenes)?
    };
    let eval_scenes = generate_scenes(config, &basis, "eval", config.oracle.n_eval_scenes)?;
    let rows = evaluate_with(config, &model, &eval_scenes)?;
    Ok(Report::new(
        config.clone(),
        rows,
        started.elapsed().as_secs_f64(),
    ))
}

/// Scores an existing model on the held-out split.
pub fn evaluate_experiment(config: &ExperimentConfig, model: &DvtieModel) -> Result<Report> {
    config.validate()?;
    let started = Instant::now();
    let basis = modality_basis(config)?;
    let eval_scenes = generate_scenes(config, &basis, "eval", config.oracle.n_eval_scenes)?;
    let rows = evaluate_with(config, model, &eval_scenes)?;
    Ok(Report::new(
        config.clone(),
        rows,
        started.elapsed().as_secs_f64(),
    ))
}

fn evaluate_with(
    config: &ExperimentConfig,
    model: &DvtieModel,
    scenes: &[SceneSummary],
) -> Result<Vec<ReportRow>> {
    let per_scene = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_scene(config, model, i, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Spearman correlation of the layer-skipped target with planted importance
/// for every `K` in `pruning.k_values`, on `oracle.n_scenes` scenes.
///
/// Rows use mode `target`: the target itself, pruned statically at each
/// ratio, stands in for the estimator.
pub fn debias_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    if config.pruning.k_values.is_empty() {
        return Err(Error::Config("pruning.k_values must be non-empty".into()));
    }
    let started = Instant::now();
    let per_scene = (0..config.oracle.n_scenes)
        .into_par_iter()
        .map(|scene_id| {
            let seed = scene_seed(config.seed, "debias", scene_id);
            let trace = scene_trace(config, seed)?;
            let n = trace.partition.n_visual;
            let mut rows = Vec::new();
            for &k in &config.pruning.k_values {
                let target = debiased_target(&trace, k)?;
                let ctx = RowContext {
                    config,
                    scene_id,
                    seed,
                    spearman: stats::spearman(&target.a, &trace.planted_importance),
                    k,
                };
                let dims = flops_dims(config, k);
                for &ratio in &config.pruning.ratios {
                    let mask = static_prune_topk(&target.a, ratio, k)?;
                    rows.push(ctx.row(
                        "target",
                        ratio,
                        mask.pruned_count() as f64 / n as f64,
                        pruning_accuracy(&mask, &trace.planted_importance, Some(ratio))?,
                        flops_relative_static(&dims, ratio)?,
                    ));
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = per_scene.into_iter().flatten().collect();
    Ok(Report::new(
        config.clone(),
        rows,
        started.elapsed().as_secs_f64(),
    ))
}

/// Maps the short axis names `K`, `lambda`, `G` and `d_lowrank` to config
/// paths; anything else is taken as a dotted path already.
pub fn sweep_axis_path(axis: &str) -> &str {
    match axis {
        "K" | "k" => "pruning.skip_layers",
        "lambda" => "dvtie.lambda",
        "G" | "g" => "dvtie.n_dhct_layers",
        "d_lowrank" | "d'" => "dvtie.d_lowrank",
        other => other,
    }
}

/// Runs the end-to-end experiment once per value of one config axis and
/// concatenates the rows.
pub fn sweep(config: &ExperimentConfig, axis: &str, values: &[Value]) -> Result<Report> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over `{axis}` has no values")));
    }
    let started = Instant::now();
    let path = sweep_axis_path(axis);
    let mut rows = Vec::new();
    for value in values {
        let setting = config.with_overrides(&[format!("{path}={value}")])?;
        log::info!("sweep {path}={value}");
        rows.extend(end_to_end_experiment(&setting)?.rows);
    }
    Ok(Report::new(
        config.clone(),
        rows,
        started.elapsed().as_secs_f64(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_hits_reachable_ratios() {
        let n = 10;
        let layers: Vec<Vec<f64>> = (0..6)
            .map(|j| (0..n).map(|i| (1 + (i + j) % n) as f64 / 55.0).collect())
            .collect();
        let target: Vec<f64> = (0..n).map(|i| (n - i) as f64 / 55.0).collect();
        let (s, _) = calibrated_atr(&layers, &target, 2, 8, true, 0.5).unwrap();
        assert!((realized_pruning_ratio(&s) - 0.5).abs() < 0.1);
    }

    #[test]
    fn random_mask_has_requested_size() {
        let m = random_mask(300, 0.35, 2, 7);
        assert_eq!(m.pruned_count(), 105);
        assert_eq!(m, random_mask(300, 0.35, 2, 7));
    }
}
