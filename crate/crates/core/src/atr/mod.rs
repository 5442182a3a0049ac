//! Pruning engines.
//!
//! [`static_prune_topk`] drops a fixed fraction of the lowest-scored tokens.
//! [`atr_run`] performs adaptive token rebalancing: starting at layer `K` it
//! accumulates each token's (shadow-damped) cross-modal attention and prunes a
//! token once its accumulated attention reaches its predicted importance.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `bits[i]` is true iff visual token `i` is pruned at or before `layer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer: usize,
    pub bits: Vec<bool>,
}

impl PruneMask {
    pub fn none(n: usize, layer: usize) -> Self {
        Self {
            layer,
            bits: vec![false; n],
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn retained_count(&self) -> usize {
        self.bits.len() - self.pruned_count()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }
}

/// Output of an adaptive run over layers `start_layer..total_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub start_layer: usize,
    pub total_layers: usize,
    pub masks: Vec<PruneMask>,
    /// Cumulative attention `C_k` after each layer.
    pub cumulative: Vec<Vec<f64>>,
    /// Shadow factor `s_k` of each layer.
    pub shadow: Vec<f64>,
    /// Retained visual tokens at each layer.
    pub retained: Vec<usize>,
    /// Importance thresholds the run compared against.
    pub target: Vec<f64>,
}

impl PruneSchedule {
    pub fn final_mask(&self) -> Option<&PruneMask> {
        self.masks.last()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("<schedule>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<schedule>", e))
    }
}

/// Prunes the `⌊ratio·N⌋` lowest scores; ties prune the lower index first.
pub fn static_prune_topk(scores: &[f64], ratio: f64, layer: usize) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} outside [0, 1]"
        )));
    }
    let n = scores.len();
    let count = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut mask = PruneMask::none(n, layer);
    for &i in &order[..count] {
        mask.bits[i] = true;
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtrStep {
    pub mask: Vec<bool>,
    pub cumulative: Vec<f64>,
    pub shadow: f64,
}

/// One layer of rebalancing.
///
/// `s = Σ target_i·prev_i`, `C = prev_C + p·(1 − s)/horizon`, and token `i`
/// becomes pruned when `C_i ≥ threshold_scale·target_i`. Pruned tokens stay
/// pruned.
pub fn atr_step(
    attention: &[f64],
    prev_mask: &[bool],
    prev_cumulative: &[f64],
    target: &[f64],
    horizon: usize,
    threshold_scale: f64,
) -> Result<AtrStep> {
    let n = target.len();
    if attention.len() != n || prev_mask.len() != n || prev_cumulative.len() != n {
        return Err(Error::Shape {
            op: "atr_step",
            left: vec![attention.len(), prev_mask.len(), prev_cumulative.len()],
            right: vec![n],
        });
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if target.iter().chain(attention).any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "attention and target must be non-negative".into(),
        ));
    }
    let shadow: f64 = target
        .iter()
        .zip(prev_mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t)
        .sum();
    let damping = 1.0 - shadow;
    let cumulative: Vec<f64> = prev_cumulative
        .iter()
        .zip(attention)
        .map(|(c, p)| c + p * damping / horizon as f64)
        .collect();
    let mask = (0..n)
        .map(|i| prev_mask[i] || cumulative[i] >= threshold_scale * target[i])
        .collect();
    Ok(AtrStep {
        mask,
        cumulative,
        shadow,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtrOptions {
    /// Renormalise each layer's attention over the retained tokens.
    pub renormalize: bool,
    /// Multiplier on the thresholds (1 is the plain rule).
    pub threshold_scale: f64,
    /// Tokens already pruned before layer `K`.
    pub initial_mask: Option<Vec<bool>>,
}

impl Default for AtrOptions {
    fn default() -> Self {
        Self {
            renormalize: true,
            threshold_scale: 1.0,
            initial_mask: None,
        }
    }
}

/// Adaptive rebalancing with default options.
///
/// `layer_attention[j]` is the head-averaged text→visual attention of layer
/// `start + j`; `target` is the normalised importance (non-negative, sums to 1).
pub fn atr_run(
    layer_attention: &[Vec<f64>],
    target: &[f64],
    start: usize,
    total_layers: usize,
) -> Result<PruneSchedule> {
    atr_run_with(
        layer_attention,
        target,
        start,
        total_layers,
        &AtrOptions::default(),
    )
}

pub fn atr_run_with(
    layer_attention: &[Vec<f64>],
    target: &[f64],
    start: usize,
    total_layers: usize,
    options: &AtrOptions,
) -> Result<PruneSchedule> {
    if start >= total_layers || layer_attention.len() != total_layers - start {
        return Err(Error::InvalidArgument(format!(
            "expected {} attention layers for K={start}, L={total_layers}; got {}",
            total_layers.saturating_sub(start),
            layer_attention.len()
        )));
    }
    let sum: f64 = target.iter().sum();
    if target.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "thresholds must be a distribution (sum {sum})"
        )));
    }
    let n = target.len();
    let horizon = total_layers - start;
    let mut mask = match &options.initial_mask {
        Some(m) if m.len() != n => {
            return Err(Error::Shape {
                op: "atr initial mask",
                left: vec![m.len()],
                right: vec![n],
            })
        }
        Some(m) => m.clone(),
        None => vec![false; n],
    };
    let mut cumulative = vec![0.0; n];
    let mut schedule = PruneSchedule {
        start_layer: start,
        total_layers,
        masks: Vec::with_capacity(horizon),
        cumulative: Vec::with_capacity(horizon),
        shadow: Vec::with_capacity(horizon),
        retained: Vec::with_capacity(horizon),
        target: target.to_vec(),
    };
    for (j, raw) in layer_attention.iter().enumerate() {
        let p = restrict(raw, &mask, options.renormalize)?;
        let step = atr_step(
            &p,
            &mask,
            &cumulative,
            target,
            horizon,
            options.threshold_scale,
        )?;
        mask = step.mask;
        cumulative = step.cumulative;
        let m = PruneMask {
            layer: start + j,
            bits: mask.clone(),
        };
        schedule.retained.push(m.retained_count());
        schedule.masks.push(m);
        schedule.cumulative.push(cumulative.clone());
        schedule.shadow.push(step.shadow);
    }
    Ok(schedule)
}

/// Zeroes pruned tokens and, optionally, rescales the rest to sum to one.
fn restrict(attention: &[f64], mask: &[bool], renormalize: bool) -> Result<Vec<f64>> {
    if attention.len() != mask.len() {
        return Err(Error::Shape {
            op: "atr attention",
            left: vec![attention.len()],
            right: vec![mask.len()],
        });
    }
    let mut p: Vec<f64> = attention
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    if renormalize {
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(p)
}

/// Mean over ATR layers of the pruned fraction.
pub fn realized_pruning_ratio(schedule: &PruneSchedule) -> f64 {
    if schedule.masks.is_empty() {
        return 0.0;
    }
    schedule
        .masks
        .iter()
        .map(|m| m.pruned_count() as f64 / m.bits.len().max(1) as f64)
        .sum::<f64>()
        / schedule.masks.len() as f64
}
