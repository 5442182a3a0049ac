use serde::{Deserialize, Serialize};

use super::{AttentionTrace, TokenPartition};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Per-token supervision built from an aggregated attention map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetAttention {
    /// Column means of the visual→visual block.
    pub a_self: Vec<f64>,
    /// Column means of the prompt→visual block.
    pub a_prompt: Vec<f64>,
    /// Column means of the caption→visual block.
    pub a_text: Vec<f64>,
    /// `a_self + a_prompt + a_text`, unnormalised.
    pub a: Vec<f64>,
    pub skip_layers: usize,
}

/// Mean of the attention matrices of layers `skip..L`.
///
/// Layers are indexed from zero, so this averages the last `L − skip` layers.
pub fn aggregate_attention(trace: &AttentionTrace, skip: usize) -> Result<Tensor> {
    aggregate_layers(&trace.layers, skip)
}

pub fn aggregate_layers(layers: &[Tensor], skip: usize) -> Result<Tensor> {
    if skip >= layers.len() {
        return Err(Error::InvalidArgument(format!(
            "skip {skip} must be below the layer count {}",
            layers.len()
        )));
    }
    let used = &layers[skip..];
    let shape = used[0].shape().to_vec();
    let mut acc = vec![0.0; used[0].len()];
    for layer in used {
        if layer.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "aggregate_attention",
                left: shape,
                right: layer.shape().to_vec(),
            });
        }
        acc.iter_mut().zip(layer.data()).for_each(|(a, v)| *a += v);
    }
    let count = used.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    Tensor::new(shape, acc)
}

/// Splits an aggregated `(N+M)×(N+M)` map into the three visual-importance
/// components. Queries index rows.
pub fn extract_target(
    aggregated: &Tensor,
    partition: &TokenPartition,
    skip: usize,
) -> Result<TargetAttention> {
    let t = partition.total();
    if aggregated.shape() != [t, t] {
        return Err(Error::Shape {
            op: "extract_target",
            left: aggregated.shape().to_vec(),
            right: vec![t, t],
        });
    }
    let n = partition.n_visual;
    let column_mean = |rows: std::ops::Range<usize>| {
        let count = rows.len() as f64;
        let mut out = vec![0.0; n];
        for r in rows {
            out.iter_mut()
                .zip(&aggregated.row(r)[..n])
                .for_each(|(acc, v)| *acc += v);
        }
        out.iter_mut().for_each(|v| *v /= count);
        out
    };
    let a_self = column_mean(0..n);
    let a_prompt = column_mean(partition.prompt_rows());
    let a_text = column_mean(partition.caption_rows());
    let a = (0..n)
        .map(|i| a_self[i] + a_prompt[i] + a_text[i])
        .collect();
    Ok(TargetAttention {
        a_self,
        a_prompt,
        a_text,
        a,
        skip_layers: skip,
    })
}

/// Aggregates from layer `skip` and extracts the target in one go.
pub fn debiased_target(trace: &AttentionTrace, skip: usize) -> Result<TargetAttention> {
    let agg = aggregate_attention(trace, skip)?;
    extract_target(&agg, &trace.partition, skip)
}

/// How query rows are pooled in [`layer_visual_importance_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualImportancePooling {
    /// Mean over all visual and text query rows.
    #[default]
    AllRows,
    /// Visual-row mean plus text-row mean.
    SumOfGroupMeans,
}

/// Average attention mass each layer places on visual columns.
pub fn layer_visual_importance(trace: &AttentionTrace) -> Vec<f64> {
    layer_visual_importance_with(trace, VisualImportancePooling::AllRows)
}

pub fn layer_visual_importance_with(
    trace: &AttentionTrace,
    pooling: VisualImportancePooling,
) -> Vec<f64> {
    let p = &trace.partition;
    let n = p.n_visual;
    trace
        .layers
        .iter()
        .map(|layer| {
            let mass = |r: usize| layer.row(r)[..n].iter().sum::<f64>();
            let visual: f64 = (0..n).map(mass).sum();
            let text: f64 = p.text_rows().map(mass).sum();
            match pooling {
                VisualImportancePooling::AllRows => (visual + text) / p.total() as f64,
                VisualImportancePooling::SumOfGroupMeans => {
                    visual / n as f64 + text / p.n_text() as f64
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::generate_trace;

    fn uniform_trace(partition: TokenPartition, layers: usize) -> AttentionTrace {
        let t = partition.total();
        let layer = Tensor::full(&[t, t], 1.0 / t as f64);
        AttentionTrace {
            partition,
            layers: vec![layer; layers],
            planted_importance: vec![1.0 / partition.n_visual as f64; partition.n_visual],
            bias_strength: 0.0,
            noise: 0.0,
            seed: 0,
            dirichlet_alpha: 0.3,
            biased_subset: vec![],
        }
    }

    #[test]
    fn average_of_equal_layers_is_that_layer() {
        let p = TokenPartition::new(3, 1, 1).unwrap();
        let tr = generate_trace(p, 4, 0.5, 0.2, 1).unwrap();
        let same = vec![tr.layers[0].clone(); 4];
        for k in 0..4 {
            let agg = aggregate_layers(&same, k).unwrap();
            for (a, b) in agg.data().iter().zip(tr.layers[0].data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn swap_and_identity_average_to_halves() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let swap = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = aggregate_layers(&[id, swap], 0).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn skip_out_of_range() {
        let p = TokenPartition::new(3, 1, 1).unwrap();
        let tr = uniform_trace(p, 3);
        assert!(aggregate_attention(&tr, 3).is_err());
    }

    #[test]
    fn uniform_map_gives_uniform_components() {
        let p = TokenPartition::new(4, 2, 3).unwrap();
        let tr = uniform_trace(p, 3);
        let t = debiased_target(&tr, 1).unwrap();
        let u = 1.0 / 9.0;
        for i in 0..4 {
            assert!((t.a_self[i] - u).abs() < 1e-15);
            assert!((t.a_prompt[i] - u).abs() < 1e-15);
            assert!((t.a_text[i] - u).abs() < 1e-15);
            assert!((t.a[i] - 3.0 * u).abs() < 1e-15);
        }
    }

    #[test]
    fn single_prompt_row_is_the_prompt_component() {
        let p = TokenPartition::new(2, 1, 1).unwrap();
        let a = Tensor::from_rows(&[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.6, 0.4, 0.0, 0.0],
            vec![0.1, 0.2, 0.3, 0.4],
        ])
        .unwrap();
        let t = extract_target(&a, &p, 0).unwrap();
        assert_eq!(t.a_prompt, vec![0.6, 0.4]);
        assert_eq!(t.a_text, vec![0.1, 0.2]);
    }

    #[test]
    fn extract_rejects_wrong_shape() {
        let p = TokenPartition::new(2, 1, 1).unwrap();
        assert!(extract_target(&Tensor::zeros(&[3, 3]), &p, 0).is_err());
    }

    #[test]
    fn visual_importance_of_uniform_and_caption_only_traces() {
        let p = TokenPartition::new(4, 2, 2).unwrap();
        let tr = uniform_trace(p, 3);
        for v in layer_visual_importance(&tr) {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let t = p.total();
        let mut caption_only = vec![0.0; t * t];
        for r in 0..t {
            caption_only[r * t + t - 1] = 1.0;
        }
        let mut tr = tr;
        tr.layers = vec![Tensor::matrix(t, t, caption_only).unwrap(); 3];
        assert_eq!(layer_visual_importance(&tr), vec![0.0; 3]);
    }

    #[test]
    fn full_bias_raises_shallow_visual_importance() {
        let p = TokenPartition::new(10, 2, 3).unwrap();
        let tr = generate_trace(p, 5, 1.0, 0.1, 21).unwrap();
        let v = layer_visual_importance(&tr);
        assert!(v[0] > v[2] && v[1] > v[2], "{v:?}");
        let g = layer_visual_importance_with(&tr, VisualImportancePooling::SumOfGroupMeans);
        assert!(g[0] > g[2]);
    }
}
