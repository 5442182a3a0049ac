use serde::{Deserialize, Serialize};

use super::params::{DhctLayerParams, DvtieParams};
use super::{DvtieConfig, DvtieModel};
use crate::numerics::{softmax, Tape, Tensor, Var};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Predicted per-token importance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// Head outputs `â`.
    pub raw: Vec<f64>,
    /// `softmax(â)`.
    pub normalized: Vec<f64>,
}

impl ImportanceScores {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let normalized = softmax(&raw);
        Self { raw, normalized }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Registers every parameter as a leaf on `tape`.
pub fn bind(
    tape: &mut Tape,
    params: &DvtieParams<Tensor>,
    requires_grad: bool,
) -> DvtieParams<Var> {
    params.map(|t| tape.leaf(t.clone(), requires_grad))
}

fn maybe_norm(tape: &mut Tape, x: Var, config: &DvtieConfig) -> Result<Var> {
    if config.layer_norm {
        tape.layer_norm_rows(x, NORM_EPS)
    } else {
        Ok(x)
    }
}

fn residual(tape: &mut Tape, skip: Var, update: Var, config: &DvtieConfig) -> Result<Var> {
    if config.residual {
        tape.add(skip, update)
    } else {
        Ok(update)
    }
}

/// One hybrid compensation layer on the tape.
///
/// 1. single-head self-attention over the visual stream (`F_st`);
/// 2. high-rank logits `(F_st W_Q)(T W_K)ᵀ / √d_model`;
/// 3. low-rank logits `σ((F_st W_Q^dy)(T W_K^dy)ᵀ / √d_lowrank)`;
/// 4. their sum, softmaxed over the text axis, weights `T W_V`;
/// 5. a GELU feed-forward block.
///
/// The text stream passes through unchanged.
pub fn dhct_on_tape(
    tape: &mut Tape,
    layer: &DhctLayerParams<Var>,
    visual: Var,
    text: Var,
    config: &DvtieConfig,
) -> Result<Var> {
    let d = config.d_model as f64;

    let h = maybe_norm(tape, visual, config)?;
    let q = tape.matmul(h, layer.sa_query)?;
    let k = tape.matmul(h, layer.sa_key)?;
    let v = tape.matmul(h, layer.sa_value)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / d.sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let attended = tape.matmul(weights, v)?;
    let attended = tape.matmul(attended, layer.sa_output)?;
    let f_st = residual(tape, visual, attended, config)?;

    let h = maybe_norm(tape, f_st, config)?;
    let f_q = tape.matmul(h, layer.cross_query)?;
    let t_k = tape.matmul(text, layer.cross_key)?;
    let t_v = tape.matmul(text, layer.cross_value)?;
    let s_high = tape.matmul_nt(f_q, t_k)?;
    let s_high = tape.scale(s_high, 1.0 / d.sqrt())?;

    let f_low = tape.matmul(h, layer.lowrank_query)?;
    let t_low = tape.matmul(text, layer.lowrank_key)?;
    let s_low = tape.matmul_nt(f_low, t_low)?;
    let s_low = tape.scale(s_low, 1.0 / (config.d_lowrank as f64).sqrt())?;
    let s_low = tape.sigmoid(s_low)?;

    let s = tape.add(s_high, s_low)?;
    let weights = if config.cross_softmax {
        tape.softmax_rows(s)?
    } else {
        s
    };
    let fused = tape.matmul(weights, t_v)?;
    let f_cs = residual(tape, f_st, fused, config)?;

    let h = maybe_norm(tape, f_cs, config)?;
    let hidden = tape.matmul(h, layer.ffn_in_weight)?;
    let hidden = tape.add_row(hidden, layer.ffn_in_bias)?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.matmul(hidden, layer.ffn_out_weight)?;
    let out = tape.add_row(out, layer.ffn_out_bias)?;
    residual(tape, f_cs, out, config)
}

fn check_inputs(config: &DvtieConfig, visual: &Tensor, text: &Tensor) -> Result<()> {
    let (_, dv) = visual.dims2("dvtie visual input")?;
    let (_, dt) = text.dims2("dvtie text input")?;
    if dv != config.d_in_visual || dt != config.d_in_text {
        return Err(Error::Shape {
            op: "dvtie forward",
            left: vec![dv, dt],
            right: vec![config.d_in_visual, config.d_in_text],
        });
    }
    Ok(())
}

/// Full estimator on the tape; returns the raw score vector `â` (length N).
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &DvtieParams<Var>,
    config: &DvtieConfig,
    visual: Var,
    text: Var,
) -> Result<Var> {
    check_inputs(config, tape.value(visual), tape.value(text))?;
    let n = tape.value(visual).rows();
    let mut f = tape.matmul(visual, params.visual_projector)?;
    let t = tape.matmul(text, params.text_projector)?;
    for layer in &params.layers {
        f = dhct_on_tape(tape, layer, f, t, config)?;
    }
    let hidden = tape.matmul(f, params.head.hidden_weight)?;
    let hidden = tape.add_row(hidden, params.head.hidden_bias)?;
    let hidden = tape.gelu(hidden)?;
    let scores = tape.matmul(hidden, params.head.output_weight)?;
    tape.reshape(scores, vec![n])
}

/// Runs a single layer outside of training.
pub fn dhct_forward(
    layer: &DhctLayerParams<Tensor>,
    visual: &Tensor,
    text_proj: &Tensor,
    config: &DvtieConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = DhctLayerParams {
        sa_query: tape.constant(layer.sa_query.clone()),
        sa_key: tape.constant(layer.sa_key.clone()),
        sa_value: tape.constant(layer.sa_value.clone()),
        sa_output: tape.constant(layer.sa_output.clone()),
        cross_query: tape.constant(layer.cross_query.clone()),
        cross_key: tape.constant(layer.cross_key.clone()),
        cross_value: tape.constant(layer.cross_value.clone()),
        lowrank_query: tape.constant(layer.lowrank_query.clone()),
        lowrank_key: tape.constant(layer.lowrank_key.clone()),
        ffn_in_weight: tape.constant(layer.ffn_in_weight.clone()),
        ffn_in_bias: tape.constant(layer.ffn_in_bias.clone()),
        ffn_out_weight: tape.constant(layer.ffn_out_weight.clone()),
        ffn_out_bias: tape.constant(layer.ffn_out_bias.clone()),
    };
    let v = tape.constant(visual.clone());
    let t = tape.constant(text_proj.clone());
    let out = dhct_on_tape(&mut tape, &bound, v, t, config)?;
    Ok(tape.value(out).clone())
}

impl DvtieModel {
    pub fn forward(&self, visual: &Tensor, text: &Tensor) -> Result<ImportanceScores> {
        let mut tape = Tape::new();
        let params = bind(&mut tape, &self.params, false);
        let v = tape.constant(visual.clone());
        let t = tape.constant(text.clone());
        let raw = forward_on_tape(&mut tape, &params, &self.config, v, t)?;
        Ok(ImportanceScores::from_raw(tape.value(raw).data().to_vec()))
    }
}
