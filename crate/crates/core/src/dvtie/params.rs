use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DvtieConfig;
use crate::numerics::Tensor;
use crate::seed;
use crate::{Error, Result};

/// Parameters of one hybrid cross-attention layer.
///
/// Generic over the slot type so the same layout carries tensors, tape
/// variables, gradients or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct DhctLayerParams<P> {
    pub sa_query: P,
    pub sa_key: P,
    pub sa_value: P,
    pub sa_output: P,
    /// High-rank cross-attention projectors.
    pub cross_query: P,
    pub cross_key: P,
    pub cross_value: P,
    /// Low-rank compensation projectors (`d_model × d_lowrank`).
    pub lowrank_query: P,
    pub lowrank_key: P,
    pub ffn_in_weight: P,
    pub ffn_in_bias: P,
    pub ffn_out_weight: P,
    pub ffn_out_bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub hidden_weight: P,
    pub hidden_bias: P,
    pub output_weight: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvtieParams<P> {
    pub visual_projector: P,
    pub text_projector: P,
    pub layers: Vec<DhctLayerParams<P>>,
    pub head: HeadParams<P>,
}

impl<P> DhctLayerParams<P> {
    const NAMES: [&'static str; 13] = [
        "sa_query",
        "sa_key",
        "sa_value",
        "sa_output",
        "cross_query",
        "cross_key",
        "cross_value",
        "lowrank_query",
        "lowrank_key",
        "ffn_in_weight",
        "ffn_in_bias",
        "ffn_out_weight",
        "ffn_out_bias",
    ];

    fn slots(&self) -> [&P; 13] {
        [
            &self.sa_query,
            &self.sa_key,
            &self.sa_value,
            &self.sa_output,
            &self.cross_query,
            &self.cross_key,
            &self.cross_value,
            &self.lowrank_query,
            &self.lowrank_key,
            &self.ffn_in_weight,
            &self.ffn_in_bias,
            &self.ffn_out_weight,
            &self.ffn_out_bias,
        ]
    }

    fn slots_mut(&mut self) -> [&mut P; 13] {
        [
            &mut self.sa_query,
            &mut self.sa_key,
            &mut self.sa_value,
            &mut self.sa_output,
            &mut self.cross_query,
            &mut self.cross_key,
            &mut self.cross_value,
            &mut self.lowrank_query,
            &mut self.lowrank_key,
            &mut self.ffn_in_weight,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_weight,
            &mut self.ffn_out_bias,
        ]
    }

    fn from_slots(mut it: impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            sa_query: it.next()?,
            sa_key: it.next()?,
            sa_value: it.next()?,
            sa_output: it.next()?,
            cross_query: it.next()?,
            cross_key: it.next()?,
            cross_value: it.next()?,
            lowrank_query: it.next()?,
            lowrank_key: it.next()?,
            ffn_in_weight: it.next()?,
            ffn_in_bias: it.next()?,
            ffn_out_weight: it.next()?,
            ffn_out_bias: it.next()?,
        })
    }
}

impl<P> DvtieParams<P> {
    /// Every slot with its dotted name, in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("visual_projector".to_string(), &self.visual_projector),
            ("text_projector".to_string(), &self.text_projector),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, p) in DhctLayerParams::<P>::NAMES.iter().zip(layer.slots()) {
                out.push((format!("layers.{l}.{name}"), p));
            }
        }
        out.push(("head.hidden_weight".into(), &self.head.hidden_weight));
        out.push(("head.hidden_bias".into(), &self.head.hidden_bias));
        out.push(("head.output_weight".into(), &self.head.output_weight));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.visual_projector, &mut self.text_projector];
        for layer in &mut self.layers {
            out.extend(layer.slots_mut());
        }
        out.push(&mut self.head.hidden_weight);
        out.push(&mut self.head.hidden_bias);
        out.push(&mut self.head.output_weight);
        out
    }

    /// Rebuilds the structure from slots in canonical order.
    pub fn from_slots(n_layers: usize, slots: impl IntoIterator<Item = P>) -> Option<Self> {
        let mut it = slots.into_iter();
        let visual_projector = it.next()?;
        let text_projector = it.next()?;
        let layers = (0..n_layers)
            .map(|_| DhctLayerParams::from_slots(&mut it))
            .collect::<Option<Vec<_>>>()?;
        let head = HeadParams {
            hidden_weight: it.next()?,
            hidden_bias: it.next()?,
            output_weight: it.next()?,
        };
        if it.next().is_some() {
            return None;
        }
        Some(Self {
            visual_projector,
            text_projector,
            layers,
            head,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> DvtieParams<Q> {
        let slots: Vec<Q> = self.named().into_iter().map(|(_, p)| f(p)).collect();
        DvtieParams::from_slots(self.layers.len(), slots).expect("same layout")
    }
}

/// Expected shape of every parameter, in canonical order.
pub fn parameter_shapes(config: &DvtieConfig) -> DvtieParams<Vec<usize>> {
    let d = config.d_model;
    let r = config.d_lowrank;
    let f = config.ffn_width();
    let h = config.head_width();
    let layer = DhctLayerParams {
        sa_query: vec![d, d],
        sa_key: vec![d, d],
        sa_value: vec![d, d],
        sa_output: vec![d, d],
        cross_query: vec![d, d],
        cross_key: vec![d, d],
        cross_value: vec![d, d],
        lowrank_query: vec![d, r],
        lowrank_key: vec![d, r],
        ffn_in_weight: vec![d, f],
        ffn_in_bias: vec![f],
        ffn_out_weight: vec![f, d],
        ffn_out_bias: vec![d],
    };
    DvtieParams {
        visual_projector: vec![config.d_in_visual, d],
        text_projector: vec![config.d_in_text, d],
        layers: vec![layer; config.n_dhct_layers],
        head: HeadParams {
            hidden_weight: vec![d, h],
            hidden_bias: vec![h],
            output_weight: vec![h, 1],
        },
    }
}

/// Total scalar parameter count implied by a configuration.
pub fn parameter_count(config: &DvtieConfig) -> usize {
    parameter_shapes(config)
        .named()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// The importance estimator: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DvtieModel {
    pub config: DvtieConfig,
    pub params: DvtieParams<Tensor>,
}

/// Initialises weights from `U(−1/√fan_in, 1/√fan_in)` and biases to zero.
pub fn init_model(config: &DvtieConfig, seed: u64) -> Result<DvtieModel> {
    config.validate()?;
    let mut rng = seed::rng_for(seed, "dvtie-init");
    let shapes = parameter_shapes(config);
    let params = shapes.map(|shape| {
        if shape.len() == 1 {
            return Tensor::zeros(shape);
        }
        let bound = 1.0 / (shape[0] as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.clone(), data).expect("positive dims")
    });
    Ok(DvtieModel {
        config: config.clone(),
        params,
    })
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: DvtieConfig,
    parameters: Vec<NamedArray>,
}

impl DvtieModel {
    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            config: self.config.clone(),
            parameters: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&ck).map_err(|e| Error::json("<checkpoint>", e))
    }

    /// Parses a checkpoint and validates every array against the config.
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::json("<checkpoint>", e))?;
        ck.config.validate()?;
        let expected = parameter_shapes(&ck.config);
        let expected = expected.named();
        if expected.len() != ck.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.len(),
                ck.parameters.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for ((name, shape), arr) in expected.into_iter().zip(ck.parameters) {
            if arr.name != name {
                return Err(Error::Checkpoint(format!(
                    "expected `{name}`, found `{}`",
                    arr.name
                )));
            }
            if &arr.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {shape:?}",
                    arr.shape
                )));
            }
            let t = Tensor::new(arr.shape, arr.data)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            tensors.push(t);
        }
        let params = DvtieParams::from_slots(ck.config.n_dhct_layers, tensors)
            .ok_or_else(|| Error::Checkpoint("parameter layout mismatch".into()))?;
        Ok(Self {
            config: ck.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path, source),
            other => other,
        })
    }
}
