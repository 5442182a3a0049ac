use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::seed;
use crate::{Error, Result};

/// Token layout of every attention matrix: `[visual | prompt | caption]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPartition {
    pub n_visual: usize,
    pub n_prompt: usize,
    pub n_caption: usize,
}

impl TokenPartition {
    pub fn new(n_visual: usize, n_prompt: usize, n_caption: usize) -> Result<Self> {
        let p = Self {
            n_visual,
            n_prompt,
            n_caption,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_visual == 0 || self.n_prompt == 0 || self.n_caption == 0 {
            return Err(Error::Config(format!(
                "all token counts must be at least 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `M = M_p + M_c`.
    pub fn n_text(&self) -> usize {
        self.n_prompt + self.n_caption
    }

    pub fn total(&self) -> usize {
        self.n_visual + self.n_text()
    }

    pub fn prompt_rows(&self) -> std::ops::Range<usize> {
        self.n_visual..self.n_visual + self.n_prompt
    }

    pub fn caption_rows(&self) -> std::ops::Range<usize> {
        self.n_visual + self.n_prompt..self.total()
    }

    pub fn text_rows(&self) -> std::ops::Range<usize> {
        self.n_visual..self.total()
    }
}

/// Knobs of the synthetic attention generator beyond the core
/// `(partition, layers, bias, noise, seed)` tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceShape {
    /// Symmetric Dirichlet concentration of the planted importance.
    pub dirichlet_alpha: f64,
    /// Fraction of visual tokens in the shallow-layer biased subset.
    pub biased_fraction: f64,
    /// Row mass on visual columns in unbiased layers.
    pub visual_share: f64,
    /// Row mass on visual columns in shallow layers at full bias.
    pub shallow_visual_share: f64,
    /// Number of leading layers carrying the bias.
    pub shallow_layers: usize,
}

impl Default for TraceShape {
    fn default() -> Self {
        Self {
            dirichlet_alpha: 0.3,
            biased_fraction: 0.2,
            visual_share: 0.5,
            shallow_visual_share: 0.9,
            shallow_layers: 2,
        }
    }
}

impl TraceShape {
    fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.dirichlet_alpha > 0.0)
            || !(self.biased_fraction > 0.0 && self.biased_fraction <= 1.0)
            || !unit(self.visual_share)
            || !unit(self.shallow_visual_share)
        {
            return Err(Error::Config(format!("invalid trace shape {self:?}")));
        }
        Ok(())
    }
}

/// Head-averaged attention matrices of every layer plus the planted answer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub partition: TokenPartition,
    /// One `(N+M)×(N+M)` row-stochastic matrix per layer.
    pub layers: Vec<Tensor>,
    pub planted_importance: Vec<f64>,
    pub bias_strength: f64,
    pub noise: f64,
    pub seed: u64,
    pub dirichlet_alpha: f64,
    /// Visual tokens that shallow layers over-attend to.
    pub biased_subset: Vec<usize>,
}

pub fn generate_trace(
    partition: TokenPartition,
    n_layers: usize,
    bias_strength: f64,
    noise: f64,
    seed: u64,
) -> Result<AttentionTrace> {
    generate_trace_with(
        partition,
        n_layers,
        bias_strength,
        noise,
        seed,
        &TraceShape::default(),
    )
}

pub fn generate_trace_with(
    partition: TokenPartition,
    n_layers: usize,
    bias_strength: f64,
    noise: f64,
    seed: u64,
    shape: &TraceShape,
) -> Result<AttentionTrace> {
    partition.validate()?;
    shape.validate()?;
    if n_layers < 3 {
        return Err(Error::Config(format!(
            "need at least 3 layers, got {n_layers}"
        )));
    }
    if !(0.0..=1.0).contains(&bias_strength) {
        return Err(Error::Config(format!(
            "bias strength {bias_strength} outside [0, 1]"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Config(format!(
            "noise {noise} must be finite and non-negative"
        )));
    }

    let n = partition.n_visual;
    let m = partition.n_text();
    let total = partition.total();

    let mut rng = seed::rng_for(seed, "planted");
    let planted = sample_dirichlet(&mut rng, n, shape.dirichlet_alpha);

    // Biased subset: drawn from the lower half of the planted ranking.
    let mut by_importance: Vec<usize> = (0..n).collect();
    by_importance.sort_by(|&a, &b| planted[a].total_cmp(&planted[b]).then(a.cmp(&b)));
    let lower = &by_importance[..(n / 2).max(1)];
    let subset_len = ((n as f64 * shape.biased_fraction).round() as usize).clamp(1, lower.len());
    let mut biased_subset: Vec<usize> = lower
        .choose_multiple(&mut rng, subset_len)
        .copied()
        .collect();
    biased_subset.sort_unstable();

    let mut bias_dist = vec![0.0; n];
    for &i in &biased_subset {
        bias_dist[i] = 1.0 / subset_len as f64;
    }

    let mut noise_rng = seed::rng_for(seed, "attention-noise");
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let shallow = l < shape.shallow_layers;
        let (dist, share): (Vec<f64>, f64) = if shallow {
            let d = planted
                .iter()
                .zip(&bias_dist)
                .map(|(p, b)| (1.0 - bias_strength) * p + bias_strength * b)
                .collect();
            let s = shape.visual_share
                + bias_strength * (shape.shallow_visual_share - shape.visual_share);
            (d, s)
        } else {
            (planted.clone(), shape.visual_share)
        };
        let text_weight = (1.0 - share) / m as f64;

        let mut data = Vec::with_capacity(total * total);
        for _row in 0..total {
            let start = data.len();
            for &d in &dist {
                data.push(share * d * jitter(&mut noise_rng, noise));
            }
            for _ in 0..m {
                data.push(text_weight * jitter(&mut noise_rng, noise));
            }
            let row = &mut data[start..];
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        layers.push(Tensor::matrix(total, total, data)?);
    }

    Ok(AttentionTrace {
        partition,
        layers,
        planted_importance: planted,
        bias_strength,
        noise,
        seed,
        dirichlet_alpha: shape.dirichlet_alpha,
        biased_subset,
    })
}

/// Multiplicative log-normal perturbation `exp(ε·z)`.
fn jitter(rng: &mut impl Rng, noise: f64) -> f64 {
    if noise == 0.0 {
        return 1.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    (noise * z).exp()
}

fn sample_dirichlet(rng: &mut impl Rng, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Text→visual attention of layer `l`, averaged over all text query rows
    /// and restricted to the visual columns.
    pub fn text_to_visual(&self, l: usize) -> Vec<f64> {
        let p = &self.partition;
        let layer = &self.layers[l];
        let mut out = vec![0.0; p.n_visual];
        for r in p.text_rows() {
            out.iter_mut()
                .zip(&layer.row(r)[..p.n_visual])
                .for_each(|(acc, v)| *acc += v);
        }
        out.iter_mut().for_each(|v| *v /= p.n_text() as f64);
        out
    }

    /// Hash over every bit of the trace contents.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.partition.hash(&mut h);
        self.seed.hash(&mut h);
        for v in self
            .planted_importance
            .iter()
            .chain(self.layers.iter().flat_map(|l| l.data()))
        {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        let t = self.partition.total();
        if self.planted_importance.len() != self.partition.n_visual {
            return Err(Error::InvalidArgument(format!(
                "planted importance has {} entries for {} visual tokens",
                self.planted_importance.len(),
                self.partition.n_visual
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.shape() != [t, t] {
                return Err(Error::Shape {
                    op: "attention layer",
                    left: layer.shape().to_vec(),
                    right: vec![t, t],
                });
            }
            if layer.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} has negative or non-finite attention"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&TraceFile::from(self)).map_err(|e| Error::json("<trace>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TraceFile = serde_json::from_str(text).map_err(|e| Error::json("<trace>", e))?;
        file.try_into()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string(&TraceFile::from(self)).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TraceFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        file.try_into()
    }
}

/// On-disk layout; layers are flat row-major arrays.
#[derive(Serialize, Deserialize)]
struct TraceFile {
    partition: TokenPartition,
    n_layers: usize,
    bias_strength: f64,
    noise: f64,
    seed: u64,
    planted_importance: Vec<f64>,
    layers: Vec<Vec<f64>>,
    #[serde(default = "default_alpha")]
    dirichlet_alpha: f64,
    #[serde(default)]
    biased_subset: Vec<usize>,
}

fn default_alpha() -> f64 {
    TraceShape::default().dirichlet_alpha
}

impl From<&AttentionTrace> for TraceFile {
    fn from(t: &AttentionTrace) -> Self {
        Self {
            partition: t.partition,
            n_layers: t.layers.len(),
            bias_strength: t.bias_strength,
            noise: t.noise,
            seed: t.seed,
            planted_importance: t.planted_importance.clone(),
            layers: t.layers.iter().map(|l| l.data().to_vec()).collect(),
            dirichlet_alpha: t.dirichlet_alpha,
            biased_subset: t.biased_subset.clone(),
        }
    }
}

impl TryFrom<TraceFile> for AttentionTrace {
    type Error = Error;

    fn try_from(f: TraceFile) -> Result<Self> {
        if f.layers.len() != f.n_layers {
            return Err(Error::InvalidArgument(format!(
                "n_layers is {} but {} layers present",
                f.n_layers,
                f.layers.len()
            )));
        }
        let t = f.partition.total();
        let layers = f
            .layers
            .into_iter()
            .map(|data| Tensor::matrix(t, t, data))
            .collect::<Result<Vec<_>>>()?;
        let trace = AttentionTrace {
            partition: f.partition,
            layers,
            planted_importance: f.planted_importance,
            bias_strength: f.bias_strength,
            noise: f.noise,
            seed: f.seed,
            dirichlet_alpha: f.dirichlet_alpha,
            biased_subset: f.biased_subset,
        };
        trace.validate()?;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part() -> TokenPartition {
        TokenPartition::new(6, 2, 3).unwrap()
    }

    #[test]
    fn rows_are_stochastic_and_planted_sums_to_one() {
        let t = generate_trace(part(), 5, 0.6, 0.3, 11).unwrap();
        assert!((t.planted_importance.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for layer in &t.layers {
            for r in 0..layer.rows() {
                let s: f64 = layer.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(layer.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn no_bias_no_noise_is_proportional_to_planted() {
        let p = part();
        let t = generate_trace(p, 4, 0.0, 0.0, 3).unwrap();
        for layer in &t.layers {
            for r in p.text_rows() {
                let row = &layer.row(r)[..p.n_visual];
                let ratio = row[0] / t.planted_importance[0];
                for (v, q) in row.iter().zip(&t.planted_importance) {
                    assert!((v - ratio * q).abs() <= 1e-12 * v.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn full_bias_concentrates_shallow_layers_on_subset() {
        let p = TokenPartition::new(20, 2, 3).unwrap();
        let t = generate_trace(p, 4, 1.0, 0.0, 5).unwrap();
        let unbiased = generate_trace(p, 4, 0.0, 0.0, 5).unwrap();
        for l in 0..2 {
            for r in p.text_rows() {
                let row = &t.layers[l].row(r)[..p.n_visual];
                for (i, v) in row.iter().enumerate() {
                    assert_eq!(
                        *v > 0.0,
                        t.biased_subset.contains(&i),
                        "layer {l} token {i}"
                    );
                }
            }
        }
        assert_eq!(t.layers[2..], unbiased.layers[2..]);
        // The subset sits in the lower half of the planted ranking.
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| t.planted_importance[b].total_cmp(&t.planted_importance[a]));
        for top in &order[..10] {
            assert!(!t.biased_subset.contains(top));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_trace(part(), 4, 0.8, 0.1, 7).unwrap();
        let b = generate_trace(part(), 4, 0.8, 0.1, 7).unwrap();
        let c = generate_trace(part(), 4, 0.8, 0.1, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(generate_trace(part(), 2, 0.5, 0.1, 0).is_err());
        assert!(generate_trace(part(), 4, 1.5, 0.1, 0).is_err());
        assert!(generate_trace(part(), 4, 0.5, -0.1, 0).is_err());
        assert!(TokenPartition::new(3, 0, 1).is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let t = generate_trace(part(), 3, 0.4, 0.2, 9).unwrap();
        let back = AttentionTrace::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn json_field_names() {
        let t = generate_trace(part(), 3, 0.4, 0.2, 9).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        for key in [
            "partition",
            "n_layers",
            "bias_strength",
            "noise",
            "seed",
            "planted_importance",
            "layers",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["layers"][0].as_array().unwrap().len(), 11 * 11);
    }
}
