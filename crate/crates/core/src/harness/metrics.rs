use serde::{Deserialize, Serialize};

use crate::atr::{PruneMask, PruneSchedule};
use crate::{Error, Result};

/// Indices of the `count` smallest values, lower index first on ties.
pub fn lowest_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Fraction of the predicted pruned set that the oracle also prunes when it
/// removes the same number of lowest-importance tokens.
///
/// With `ratio` given, the predicted mask must prune exactly `⌊ratio·N⌋`
/// tokens. An empty pruned set scores 1.
pub fn pruning_accuracy(pred: &PruneMask, importance: &[f64], ratio: Option<f64>) -> Result<f64> {
    let n = importance.len();
    if pred.bits.len() != n {
        return Err(Error::Shape {
            op: "pruning_accuracy",
            left: vec![pred.bits.len()],
            right: vec![n],
        });
    }
    let count = pred.pruned_count();
    if let Some(r) = ratio {
        let expected = (r * n as f64).floor() as usize;
        if count != expected {
            return Err(Error::InvalidArgument(format!(
                "mask prunes {count} tokens, ratio {r} implies {expected}"
            )));
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    let hits = lowest_indices(importance, count)
        .into_iter()
        .filter(|&i| pred.bits[i])
        .count();
    Ok(hits as f64 / count as f64)
}

/// Shape of the host transformer for the FLOPs estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsDims {
    pub n_layers: usize,
    pub skip_layers: usize,
    pub n_visual: usize,
    pub n_text: usize,
    pub d_model: usize,
    pub ffn_multiplier: usize,
}

/// Dense-layer cost with `n` live tokens: projections, attention and FFN.
pub fn layer_flops(n: f64, d: f64, ffn_multiplier: f64) -> f64 {
    4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * (ffn_multiplier * d)
}

/// Estimated cost ratio given the retained visual count of every layer from
/// `skip_layers` on. Earlier layers see all tokens.
pub fn flops_relative(dims: &FlopsDims, retained: &[usize]) -> Result<f64> {
    if dims.skip_layers > dims.n_layers || retained.len() != dims.n_layers - dims.skip_layers {
        return Err(Error::InvalidArgument(format!(
            "expected {} retained counts, got {}",
            dims.n_layers.saturating_sub(dims.skip_layers),
            retained.len()
        )));
    }
    if let Some(r) = retained.iter().find(|&&r| r > dims.n_visual) {
        return Err(Error::InvalidArgument(format!(
            "retained count {r} exceeds {} visual tokens",
            dims.n_visual
        )));
    }
    let d = dims.d_model as f64;
    let f = dims.ffn_multiplier as f64;
    let m = dims.n_text as f64;
    let full = layer_flops((dims.n_visual + dims.n_text) as f64, d, f);
    let pruned: f64 = dims.skip_layers as f64 * full
        + retained
            .iter()
            .map(|&r| layer_flops(r as f64 + m, d, f))
            .sum::<f64>();
    Ok(pruned / (dims.n_layers as f64 * full))
}

/// Fixed ratio applied from `skip_layers` on.
pub fn flops_relative_static(dims: &FlopsDims, ratio: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} outside [0, 1]"
        )));
    }
    let kept = dims.n_visual - (ratio * dims.n_visual as f64).floor() as usize;
    flops_relative(
        dims,
        &vec![kept; dims.n_layers - dims.skip_layers.min(dims.n_layers)],
    )
}

pub fn flops_relative_schedule(dims: &FlopsDims, schedule: &PruneSchedule) -> Result<f64> {
    flops_relative(dims, &schedule.retained)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> FlopsDims {
        FlopsDims {
            n_layers: 32,
            skip_layers: 2,
            n_visual: 300,
            n_text: 50,
            d_model: 4096,
            ffn_multiplier: 4,
        }
    }

    #[test]
    fn accuracy_extremes() {
        let imp = [0.1, 0.4, 0.2, 0.3];
        let oracle = PruneMask {
            layer: 0,
            bits: vec![true, false, true, false],
        };
        assert_eq!(pruning_accuracy(&oracle, &imp, Some(0.5)).unwrap(), 1.0);
        let comp = PruneMask {
            layer: 0,
            bits: vec![false, true, false, true],
        };
        assert_eq!(pruning_accuracy(&comp, &imp, Some(0.5)).unwrap(), 0.0);
        assert_eq!(
            pruning_accuracy(&PruneMask::none(4, 0), &imp, None).unwrap(),
            1.0
        );
        assert!(pruning_accuracy(&comp, &imp, Some(0.25)).is_err());
    }

    #[test]
    fn no_pruning_costs_one() {
        assert_eq!(flops_relative_static(&dims(), 0.0).unwrap(), 1.0);
    }

    #[test]
    fn full_pruning_without_text_tends_to_skip_fraction() {
        let d = FlopsDims {
            n_text: 0,
            ..dims()
        };
        assert_eq!(flops_relative_static(&d, 1.0).unwrap(), 2.0 / 32.0);
    }

    #[test]
    fn schedule_lengths_checked() {
        assert!(flops_relative(&dims(), &[300; 29]).is_err());
        assert!(flops_relative(&dims(), &[301; 30]).is_err());
    }
}
