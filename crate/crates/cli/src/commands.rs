use std::ops::ControlFlow;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use vtprune_core::dvtie::{evaluate, model_gradient_errors, tiny_config, Sample};
use vtprune_core::harness::{
    debias_experiment, end_to_end_experiment, evaluate_experiment, generate_scenes, modality_basis,
    scene_seed, scene_trace, sweep, train_estimator_with, write_report, Report,
};
use vtprune_core::{DvtieModel, Error, ExperimentConfig};

use crate::{Command, Failure};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-5;

fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("plain data serialises");
    write_text(path, &text)
}

/// Stdout carries one JSON summary line per command.
fn emit(value: Value) {
    println!("{value}");
}

/// The report path must stay inside the output directory.
fn report_path(config: &ExperimentConfig, out: &Path) -> Result<PathBuf, Failure> {
    let rel = &config.output;
    let escapes = rel
        .components()
        .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
    if escapes || rel.as_os_str().is_empty() {
        return Err(Failure::Validation(Error::Config(format!(
            "output `{}` must be a relative path inside the output directory",
            rel.display()
        ))));
    }
    Ok(out.join(rel))
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<Value>), Failure> {
    let (axis, values) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--sweep expects AXIS=V1,V2,..., got `{spec}`")))?;
    let values: Vec<Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if axis.trim().is_empty() || values.is_empty() {
        return Err(Failure::Usage(format!(
            "--sweep `{spec}` names no axis or values"
        )));
    }
    Ok((axis.trim().to_string(), values))
}

fn load_model(path: &Path, config: &mut ExperimentConfig) -> Result<DvtieModel, Failure> {
    let model = DvtieModel::load(path).map_err(Failure::Runtime)?;
    let (m, c) = (&model.config, &config.dvtie);
    let dims = |x: &vtprune_core::DvtieConfig| (x.n_visual, x.n_text, x.d_in_visual, x.d_in_text);
    if dims(m) != dims(c) {
        return Err(Failure::Validation(Error::Config(format!(
            "checkpoint expects (N, M, d_visual, d_text) = {:?} but the config gives {:?}",
            dims(m),
            dims(c)
        ))));
    }
    config.dvtie = model.config.clone();
    Ok(model)
}

/// Validates, prepares the output directory with the resolved config and
/// dispatches.
pub fn run(command: &Command, mut config: ExperimentConfig, out: &Path) -> Result<(), Failure> {
    config.validate().map_err(Failure::Validation)?;
    let report_file = report_path(&config, out)?;
    let sweep_spec = match command {
        Command::Prune { sweep: Some(s), .. } => Some(parse_sweep(s)?),
        _ => None,
    };
    let model = match command {
        Command::Evaluate { model }
        | Command::Prune {
            model: Some(model), ..
        } => Some(load_model(model, &mut config)?),
        _ => None,
    };

    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write_text(
        &out.join("resolved_config.json"),
        &config.to_json().map_err(Failure::Runtime)?,
    )?;

    match command {
        Command::GenTraces { split, count } => gen_traces(&config, out, split, *count),
        Command::Train => train(&config, out),
        Command::Evaluate { .. } => {
            evaluate_checkpoint(&config, out, model.as_ref().expect("loaded above"))
        }
        Command::Prune { .. } => {
            let report = match (&sweep_spec, &model) {
                (Some((axis, values)), _) => sweep(&config, axis, values)?,
                (None, Some(model)) => evaluate_experiment(&config, model)?,
                (None, None) => end_to_end_experiment(&config)?,
            };
            save_report(&report, &report_file)
        }
        Command::DebiasSweep => {
            let report = debias_experiment(&config)?;
            save_report(&report, &report_file)
        }
        Command::Gradcheck { seed } => gradcheck(&config, out, *seed),
    }
}

fn gen_traces(
    config: &ExperimentConfig,
    out: &Path,
    split: &str,
    count: Option<usize>,
) -> Result<(), Failure> {
    let count = count.unwrap_or(if split == "eval" {
        config.oracle.n_eval_scenes
    } else {
        config.oracle.n_scenes
    });
    let dir = out.join("traces");
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let seed = scene_seed(config.seed, split, i);
        let trace = scene_trace(config, seed)?;
        let path = dir.join(format!("{split}-{i:05}.json"));
        trace.write(&path)?;
        log::info!("wrote {}", path.display());
        files.push(json!({ "scene_id": i, "seed": seed, "file": path.file_name().map(|f| f.to_string_lossy().into_owned()) }));
    }
    write_json(&dir.join("manifest.json"), &files)?;
    emit(json!({ "command": "gen-traces", "split": split, "traces": count, "dir": dir }));
    Ok(())
}

fn train(config: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let basis = modality_basis(config)?;
    let scenes = generate_scenes(config, &basis, "train", config.oracle.n_scenes)?;
    log::info!("generated {} training scenes", scenes.len());
    let mut history = Vec::new();
    let outcome = train_estimator_with(config, &scenes, |summary, _| {
        log::info!(
            "epoch {} loss {:.6} lr {:.3e}",
            summary.epoch,
            summary.mean_loss,
            summary.learning_rate
        );
        history.push(*summary);
        ControlFlow::Continue(())
    })?;
    let checkpoint = out.join("model.json");
    outcome.model.save(&checkpoint)?;
    let mut csv = String::from("epoch,mean_loss,learning_rate\n");
    for h in &history {
        csv.push_str(&format!(
            "{},{},{}\n",
            h.epoch, h.mean_loss, h.learning_rate
        ));
    }
    write_text(&out.join("history.csv"), &csv)?;
    emit(json!({
        "command": "train",
        "checkpoint": checkpoint,
        "epochs": history.len(),
        "final_loss": history.last().map(|h| h.mean_loss),
        "parameters": outcome.model.parameter_count(),
    }));
    Ok(())
}

fn evaluate_checkpoint(
    config: &ExperimentConfig,
    out: &Path,
    model: &DvtieModel,
) -> Result<(), Failure> {
    let basis = modality_basis(config)?;
    let samples: Vec<Sample> =
        generate_scenes(config, &basis, "eval", config.oracle.n_eval_scenes)?
            .into_iter()
            .map(|s| s.sample)
            .collect();
    let result = evaluate(model, &samples)?;
    write_json(&out.join("evaluation.json"), &result)?;
    emit(json!({
        "command": "evaluate",
        "scenes": samples.len(),
        "mean_spearman": result.mean_spearman,
    }));
    Ok(())
}

fn save_report(report: &Report, path: &Path) -> Result<(), Failure> {
    write_report(report, path)?;
    let summary: Vec<Value> = report
        .aggregates
        .iter()
        .map(|a| {
            let mut v = serde_json::to_value(&a.key).expect("plain data serialises");
            for (name, s) in &a.metrics {
                v[name] = json!(s.mean);
            }
            v
        })
        .collect();
    emit(json!({ "report": path, "rows": report.rows.len(), "aggregates": summary }));
    Ok(())
}

fn gradcheck(config: &ExperimentConfig, out: &Path, seed: u64) -> Result<(), Failure> {
    let mut tiny = tiny_config();
    tiny.lambda = config.dvtie.lambda;
    let errors = model_gradient_errors(&tiny, seed, GRADCHECK_STEP)?;
    let max = errors.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    let passed = max < GRADCHECK_TOLERANCE;
    let result = json!({
        "command": "gradcheck",
        "max_relative_error": max,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
        "parameters": errors.iter().map(|(n, e)| (n.clone(), json!(e))).collect::<serde_json::Map<_, _>>(),
    });
    write_json(&out.join("gradcheck.json"), &result)?;
    emit(json!({ "command": "gradcheck", "max_relative_error": max, "passed": passed }));
    if passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative gradient error {max:.3e} is not below {GRADCHECK_TOLERANCE:e}"
        )))
    }
}
