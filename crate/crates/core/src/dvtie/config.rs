use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture and optimisation settings of the importance estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvtieConfig {
    /// Visual tokens per scene (`N`).
    pub n_visual: usize,
    /// Text tokens per scene (`M`).
    pub n_text: usize,
    pub d_in_visual: usize,
    pub d_in_text: usize,
    pub d_model: usize,
    /// Rank of the sigmoid compensation branch; must be below `d_model`.
    pub d_lowrank: usize,
    pub n_dhct_layers: usize,
    pub ffn_multiplier: usize,
    /// Hidden width of the scoring head; `d_model / 2` when unset.
    pub head_hidden: Option<usize>,
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Residual connections around self-attention, cross-attention and FFN.
    pub residual: bool,
    /// Pre-norm row normalisation before each sub-block.
    pub layer_norm: bool,
    /// Softmax the hybrid logits over the text axis before weighting values.
    pub cross_softmax: bool,
}

impl Default for DvtieConfig {
    fn default() -> Self {
        Self {
            n_visual: 300,
            n_text: 50,
            d_in_visual: 32,
            d_in_text: 32,
            d_model: 256,
            d_lowrank: 64,
            n_dhct_layers: 2,
            ffn_multiplier: 2,
            head_hidden: None,
            lambda: 0.2,
            learning_rate: 0.0008,
            weight_decay: 0.01,
            epochs: 80,
            batch_size: 64,
            seed: 0,
            residual: true,
            layer_norm: false,
            cross_softmax: true,
        }
    }
}

impl DvtieConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_visual", self.n_visual),
            ("n_text", self.n_text),
            ("d_in_visual", self.d_in_visual),
            ("d_in_text", self.d_in_text),
            ("d_model", self.d_model),
            ("d_lowrank", self.d_lowrank),
            ("ffn_multiplier", self.ffn_multiplier),
            ("batch_size", self.batch_size),
            ("head_hidden", self.head_width()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dvtie.{name} must be at least 1")));
        }
        if self.d_lowrank >= self.d_model {
            return Err(Error::Config(format!(
                "dvtie.d_lowrank ({}) must be below d_model ({})",
                self.d_lowrank, self.d_model
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "dvtie.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "dvtie.learning_rate and dvtie.weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.head_hidden.unwrap_or(self.d_model / 2)
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_multiplier * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        DvtieConfig::default().validate().unwrap();
    }

    #[test]
    fn lowrank_must_be_below_model_width() {
        let c = DvtieConfig {
            d_model: 16,
            d_lowrank: 16,
            ..DvtieConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_dimension_rejected() {
        let c = DvtieConfig {
            d_in_text: 0,
            ..DvtieConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("d_in_text"));
    }
}
