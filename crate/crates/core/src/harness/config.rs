use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dvtie::DvtieConfig;
use crate::oracle::{FeatureSpec, TokenPartition, TraceShape};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Synthetic scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub n_visual: usize,
    pub n_prompt: usize,
    pub n_caption: usize,
    pub n_layers: usize,
    pub bias_strength: f64,
    pub noise: f64,
    /// Training scenes.
    pub n_scenes: usize,
    /// Held-out scenes; one report row per scene, mode and ratio.
    pub n_eval_scenes: usize,
    pub shape: TraceShape,
    pub features: FeatureSpec,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            n_visual: 300,
            n_prompt: 10,
            n_caption: 40,
            n_layers: 32,
            bias_strength: 0.8,
            noise: 0.1,
            n_scenes: 200,
            n_eval_scenes: 50,
            shape: TraceShape::default(),
            features: FeatureSpec::default(),
        }
    }
}

impl OracleSettings {
    pub fn partition(&self) -> Result<TokenPartition> {
        TokenPartition::new(self.n_visual, self.n_prompt, self.n_caption)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// Uniformly random tokens at the requested ratio.
    Random,
    /// Lowest predicted scores at the requested ratio.
    Static,
    /// Adaptive rebalancing, thresholds scaled to hit the requested ratio.
    Adaptive,
}

impl PruneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::Random => "random",
            PruneMode::Static => "static",
            PruneMode::Adaptive => "adaptive",
        }
    }
}

/// Dimensions of the host model used by the FLOPs estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostModel {
    pub d_model: usize,
    pub ffn_multiplier: usize,
}

impl Default for HostModel {
    fn default() -> Self {
        Self {
            d_model: 4096,
            ffn_multiplier: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningSettings {
    pub modes: Vec<PruneMode>,
    pub ratios: Vec<f64>,
    /// Layers skipped when building targets; pruning starts at this layer.
    pub skip_layers: usize,
    /// Values tried by the debias experiment.
    pub k_values: Vec<usize>,
    /// Renormalise attention over retained tokens during adaptive runs.
    pub renormalize: bool,
    pub host: HostModel,
}

impl Default for PruningSettings {
    fn default() -> Self {
        Self {
            modes: vec![PruneMode::Random, PruneMode::Static, PruneMode::Adaptive],
            ratios: vec![0.35, 0.65, 0.9],
            skip_layers: 2,
            k_values: vec![0, 1, 2, 3],
            renormalize: true,
            host: HostModel::default(),
        }
    }
}

pub const METRIC_COLUMNS: [&str; 4] = [
    "ratio_realized",
    "pruning_accuracy",
    "spearman",
    "flops_relative",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub oracle: OracleSettings,
    pub dvtie: DvtieConfig,
    pub pruning: PruningSettings,
    /// Metric columns summarised in the report aggregates.
    pub metrics: Vec<String>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut config = Self {
            seed: 0,
            oracle: OracleSettings::default(),
            dvtie: DvtieConfig::default(),
            pruning: PruningSettings::default(),
            metrics: METRIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
            output: PathBuf::from("report.csv"),
        };
        config.sync();
        config
    }
}

impl ExperimentConfig {
    /// Parses a JSON config; absent fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: Self =
            serde_json::from_str(text).map_err(|e| Error::json("<config>", e))?;
        config.sync();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        config.sync();
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("<config>", e))
    }

    /// Copies the scene dimensions into the estimator settings and derives
    /// the estimator seed from the top-level seed.
    pub fn sync(&mut self) {
        let o = &self.oracle;
        self.dvtie.n_visual = o.n_visual;
        self.dvtie.n_text = o.n_prompt + o.n_caption;
        self.dvtie.d_in_visual = o.features.d_visual;
        self.dvtie.d_in_text = o.features.d_text;
        self.dvtie.seed = derive_seed(self.seed, "dvtie");
    }

    /// Applies `key=value` overrides addressed by dotted paths. Values are
    /// read as JSON when they parse, otherwise as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).map_err(|e| Error::json("<config>", e))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Override(format!("expected key=value, got `{item}`")))?;
            set_path(&mut tree, key.trim(), parse_value(raw))?;
        }
        let mut config: Self = serde_json::from_value(tree)
            .map_err(|e| Error::Override(format!("override does not fit the schema: {e}")))?;
        config.sync();
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.oracle;
        o.partition().map_err(|e| Error::Config(e.to_string()))?;
        if o.n_layers < 3 {
            return Err(Error::Config(format!(
                "oracle.n_layers must be >= 3, got {}",
                o.n_layers
            )));
        }
        if !(0.0..=1.0).contains(&o.bias_strength) {
            return Err(Error::Config(
                "oracle.bias_strength must lie in [0, 1]".into(),
            ));
        }
        if !(o.noise >= 0.0) {
            return Err(Error::Config("oracle.noise must be >= 0".into()));
        }
        if o.n_scenes == 0 || o.n_eval_scenes == 0 {
            return Err(Error::Config(
                "oracle.n_scenes and oracle.n_eval_scenes must be >= 1".into(),
            ));
        }
        let p = &self.pruning;
        if let Some(r) = p.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("pruning ratio {r} outside [0, 1]")));
        }
        if p.ratios.is_empty() || p.modes.is_empty() {
            return Err(Error::Config(
                "pruning.ratios and pruning.modes must be non-empty".into(),
            ));
        }
        if let Some(k) = std::iter::once(&p.skip_layers)
            .chain(&p.k_values)
            .find(|&&k| k >= o.n_layers)
        {
            return Err(Error::Config(format!(
                "K = {k} must be below n_layers = {}",
                o.n_layers
            )));
        }
        if p.host.d_model == 0 || p.host.ffn_multiplier == 0 {
            return Err(Error::Config("pruning.host dimensions must be >= 1".into()));
        }
        if let Some(m) = self
            .metrics
            .iter()
            .find(|m| !METRIC_COLUMNS.contains(&m.as_str()))
        {
            return Err(Error::Config(format!(
                "unknown metric `{m}`; expected one of {METRIC_COLUMNS:?}"
            )));
        }
        self.dvtie.validate()
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::Override(format!(
                "`{key}`: `{}` is not a section",
                parts[..depth].join(".")
            ))
        })?;
        node = map
            .get_mut(*part)
            .ok_or_else(|| Error::Override(format!("unknown key `{key}`")))?;
    }
    *node = value;
    Ok(())
}
