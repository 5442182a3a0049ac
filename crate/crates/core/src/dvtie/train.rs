use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{bind, forward_on_tape};
use super::loss::total_loss_on_tape;
use super::params::DvtieParams;
use super::{DvtieConfig, DvtieModel};
use crate::numerics::{Tape, Tensor};
use crate::oracle::TargetAttention;
use crate::seed;
use crate::stats;
use crate::{Error, Result};

/// One training example: features of a scene and its attention target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub visual: Tensor,
    pub text: Tensor,
    pub target: TargetAttention,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DvtieModel,
    /// Mean training loss of every completed epoch.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// Loss and parameter gradients of one sample.
pub fn sample_value_and_grad(
    model: &DvtieModel,
    sample: &Sample,
    lambda: f64,
) -> Result<(f64, DvtieParams<Tensor>)> {
    let mut tape = Tape::new();
    let params = bind(&mut tape, &model.params, true);
    let v = tape.constant(sample.visual.clone());
    let t = tape.constant(sample.text.clone());
    let raw = forward_on_tape(&mut tape, &params, &model.config, v, t)?;
    let loss = total_loss_on_tape(&mut tape, raw, &sample.target.a, lambda)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, params.map(|&p| grads.get_or_zeros(p, &tape))))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &DvtieParams<Tensor>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut DvtieParams<Tensor>, grads: &DvtieParams<Tensor>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let grads = grads.named();
        for (slot, ((p, (_, g)), (m, v))) in params
            .slots_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
            .enumerate()
        {
            debug_assert_eq!(p.len(), g.len(), "slot {slot}");
            let decay = 1.0 - lr * self.weight_decay;
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let w = &mut p.data_mut()[i];
                *w = *w * decay - lr * update;
            }
        }
    }
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

pub fn train(model: DvtieModel, dataset: &[Sample], config: &DvtieConfig) -> Result<TrainOutcome> {
    train_with_observer(model, dataset, config, |_, _| ControlFlow::Continue(()))
}

/// Trains with an observer that sees each finished epoch and may stop early.
pub fn train_with_observer<F>(
    mut model: DvtieModel,
    dataset: &[Sample],
    config: &DvtieConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochSummary, &DvtieModel) -> ControlFlow<()>,
{
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    config.validate()?;
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut optimizer = AdamW::new(&model.params, config.weight_decay);
    let mut rng = seed::rng_for(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(dataset.len());
        let mut lr = config.learning_rate;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, DvtieParams<Tensor>)>> = batch
                .par_iter()
                .map(|&i| sample_value_and_grad(&model, &dataset[i], config.lambda))
                .collect();
            let mut summed: Option<DvtieParams<Tensor>> = None;
            for (r, &sample) in results.into_iter().zip(batch) {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        value: loss,
                        epoch,
                        step,
                        sample,
                    });
                }
                losses.push(loss);
                match &mut summed {
                    None => summed = Some(grads),
                    Some(acc) => {
                        for (a, (_, g)) in acc.slots_mut().into_iter().zip(grads.named()) {
                            a.data_mut()
                                .iter_mut()
                                .zip(g.data())
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = summed.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.slots_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            lr = cosine_lr(config.learning_rate, step, total_steps);
            optimizer.step(&mut model.params, &grads, lr);
            step += 1;
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: stats::mean(&losses),
            learning_rate: lr,
        };
        log::debug!(
            "epoch {} loss {:.6} lr {:.2e}",
            summary.epoch,
            summary.mean_loss,
            summary.learning_rate
        );
        history.push(summary.mean_loss);
        if observer(&summary, &model).is_break() {
            break;
        }
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_spearman: f64,
    pub per_sample: Vec<f64>,
}

/// Spearman correlation between raw predictions and targets, per sample.
pub fn evaluate(model: &DvtieModel, dataset: &[Sample]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let per_sample = dataset
        .par_iter()
        .map(|s| {
            if s.target.a.len() < 2 {
                return Err(Error::InvalidArgument(
                    "rank correlation needs at least two tokens".into(),
                ));
            }
            let scores = model.forward(&s.visual, &s.text)?;
            Ok(stats::spearman(&scores.raw, &s.target.a))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Evaluation {
        mean_spearman: stats::mean(&per_sample),
        per_sample,
    })
}
