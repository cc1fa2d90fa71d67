//! JSON run configuration. Unknown keys are rejected everywhere so a typo
//! cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, Variant};
use crate::bench::{LayerBenchConfig, LayerShape, ModelBenchConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{GradCheckConfig, ToyTask, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRef {
    pub preset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(PresetRef),
    Explicit(ModelConfig),
}

impl ModelSpec {
    pub fn preset(name: &str) -> Self {
        ModelSpec::Preset(PresetRef { preset: name.into() })
    }

    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Preset(p) => ModelConfig::preset(&p.preset)?,
            ModelSpec::Explicit(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchLayerSpec {
    pub shape: LayerShape,
    #[serde(default)]
    pub run: LayerBenchConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Independent harness repetitions.
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::None, Variant::Lora, Variant::PfLora, Variant::ZfloraMinimal]
}

fn default_runs() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<ToyTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench_layer: Option<BenchLayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench_model: Option<ModelBenchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Subcommand that produced the outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Model whose shapes were actually materialised, when smaller than `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_model: Option<ModelSpec>,
    /// Input checkpoint paths by role (`base`, `fused`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub prompts: usize,
    pub prompt_len: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_and_explicit_models() {
        let a = RunConfig::from_json(r#"{"model":{"preset":"tiny"},"seed":3}"#).unwrap();
        assert_eq!(
            a.model.unwrap().resolve().unwrap(),
            ModelConfig::preset("tiny").unwrap()
        );
        let explicit = serde_json::to_string(&ModelConfig::preset("tiny").unwrap()).unwrap();
        let b = RunConfig::from_json(&format!(r#"{{"model":{explicit}}}"#)).unwrap();
        assert!(matches!(b.model, Some(ModelSpec::Explicit(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sede":3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model":{"preset":"tiny","extra":1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train":{"steps":5,"lr":0.001,"momentum":0.9}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig {
            model: Some(ModelSpec::preset("1B")),
            adapter: Some(AdapterConfig::new(Variant::ZfloraMinimal, 32)),
            train: Some(TrainConfig::adam(10, 1e-3)),
            seed: Some(1),
            ..Default::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
