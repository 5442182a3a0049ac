//! Synthetic visual and text embeddings for a trace.
//!
//! Each scene has a hidden query direction `z` in a shared latent space. A
//! visual token's latent is `signal · s_i · z + r_i`, where `s_i` is the
//! standardised log planted importance and `r_i` is an object identity
//! orthogonal to `z`. Prompt tokens encode `z`; caption tokens describe
//! random objects. Importance is therefore only recoverable by relating the
//! visual tokens to the prompt.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AttentionTrace;
use crate::numerics::Tensor;
use crate::seed;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub d_visual: usize,
    pub d_text: usize,
    pub latent_dim: usize,
    /// Scale of the importance component along the query direction.
    pub signal: f64,
    /// Standard deviation of per-token noise on prompt latents.
    pub prompt_noise: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            d_visual: 32,
            d_text: 32,
            latent_dim: 32,
            signal: 1.0,
            prompt_noise: 0.1,
        }
    }
}

/// Fixed maps from the latent space into each modality, shared by every
/// scene of an experiment.
#[derive(Clone, Debug)]
pub struct ModalityBasis {
    visual: Tensor,
    text: Tensor,
    prompt_type: Vec<f64>,
    caption_type: Vec<f64>,
}

impl ModalityBasis {
    pub fn new(spec: &FeatureSpec, seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, "modality-basis");
        let r = spec.latent_dim;
        let scale = 1.0 / (r as f64).sqrt();
        let visual = gaussian_matrix(&mut rng, r, spec.d_visual, scale)?;
        let text = gaussian_matrix(&mut rng, r, spec.d_text, scale)?;
        let prompt_type = unit_vector(&mut rng, spec.d_text);
        let caption_type = unit_vector(&mut rng, spec.d_text);
        Ok(Self {
            visual,
            text,
            prompt_type,
            caption_type,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFeatures {
    /// `N × d_visual`
    pub visual: Tensor,
    /// `M × d_text`, prompt tokens first.
    pub text: Tensor,
}

pub fn synthesize_features(
    trace: &AttentionTrace,
    spec: &FeatureSpec,
    basis: &ModalityBasis,
) -> Result<SceneFeatures> {
    let mut rng = seed::rng_for(trace.seed, "features");
    let p = &trace.partition;
    let r = spec.latent_dim;
    let z = unit_vector(&mut rng, r);

    let logs: Vec<f64> = trace
        .planted_importance
        .iter()
        .map(|v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
    let standardized: Vec<f64> = logs
        .iter()
        .map(|l| if sd > 0.0 { (l - mean) / sd } else { 0.0 })
        .collect();

    let identities: Vec<Vec<f64>> = (0..p.n_visual)
        .map(|_| {
            let mut v = gaussian_vec(&mut rng, r, 1.0 / (r as f64).sqrt());
            let along: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&z).for_each(|(a, b)| *a -= along * b);
            v
        })
        .collect();

    let mut visual_latent = Vec::with_capacity(p.n_visual * r);
    for (s, id) in standardized.iter().zip(&identities) {
        visual_latent.extend(id.iter().zip(&z).map(|(a, b)| a + spec.signal * s * b));
    }
    let visual = Tensor::matrix(p.n_visual, r, visual_latent)?.matmul(&basis.visual)?;

    let mut text_latent = Vec::with_capacity(p.n_text() * r);
    for _ in 0..p.n_prompt {
        let eta = gaussian_vec(&mut rng, r, spec.prompt_noise / (r as f64).sqrt());
        text_latent.extend(z.iter().zip(&eta).map(|(a, b)| a + b));
    }
    for _ in 0..p.n_caption {
        let object = rng.random_range(0..p.n_visual);
        text_latent.extend_from_slice(&identities[object]);
    }
    let mut text = Tensor::matrix(p.n_text(), r, text_latent)?.matmul(&basis.text)?;
    let d_text = spec.d_text;
    for (row, chunk) in text.data_mut().chunks_mut(d_text).enumerate() {
        let kind = if row < p.n_prompt {
            &basis.prompt_type
        } else {
            &basis.caption_type
        };
        chunk.iter_mut().zip(kind).for_each(|(a, b)| *a += b);
    }
    Ok(SceneFeatures { visual, text })
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn unit_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Result<Tensor> {
    Tensor::matrix(rows, cols, gaussian_vec(rng, rows * cols, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate_trace, TokenPartition};

    #[test]
    fn shapes_and_determinism() {
        let p = TokenPartition::new(7, 2, 3).unwrap();
        let tr = generate_trace(p, 3, 0.2, 0.1, 4).unwrap();
        let spec = FeatureSpec {
            d_visual: 12,
            d_text: 10,
            latent_dim: 8,
            ..FeatureSpec::default()
        };
        let basis = ModalityBasis::new(&spec, 1).unwrap();
        let a = synthesize_features(&tr, &spec, &basis).unwrap();
        let b = synthesize_features(&tr, &spec, &basis).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.visual.shape(), &[7, 12]);
        assert_eq!(a.text.shape(), &[5, 10]);
        assert!(a.visual.all_finite() && a.text.all_finite());
    }
}
