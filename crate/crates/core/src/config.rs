//! JSON run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, BackboneKind, GateInput};
use crate::data::{generate_synthetic, load_csv, Dictionaries, SyntheticConfig};
use crate::embedding::{ExampleBatch, FeatureSchema};
use crate::error::{Error, Result};
use crate::hmdrr::QuantizerConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// JSON file holding a feature schema, as written by `gen-data`.
    pub schema_path: Option<PathBuf>,
    /// Used when no CSV paths are given.
    pub synthetic: Option<SyntheticConfig>,
}

fn default_backbone() -> BackboneConfig {
    BackboneConfig::new(BackboneKind::Moe)
}

fn default_quantizer() -> Option<QuantizerConfig> {
    Some(QuantizerConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schema: Option<FeatureSchema>,
    /// `null` disables the quantizer.
    #[serde(default = "default_quantizer")]
    pub quantizer: Option<QuantizerConfig>,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: None,
            quantizer: default_quantizer(),
            backbone: default_backbone(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Training and test splits plus the schema they follow.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub schema: FeatureSchema,
    pub train: ExampleBatch,
    pub test: Option<ExampleBatch>,
    pub dictionaries: Option<Dictionaries>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn uses_quantizer(&self) -> bool {
        self.backbone.kind != BackboneKind::Dnn && self.backbone.gate_input == GateInput::HierarchicalSd
    }

    /// The model configuration this run resolves to.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let config = if self.uses_quantizer() {
            let q = self.quantizer.clone().ok_or_else(|| {
                Error::Config("gate_input hierarchical_sD requires the quantizer section".into())
            })?;
            ModelConfig::new(self.backbone.clone(), q)
        } else {
            ModelConfig::new(self.backbone.clone(), QuantizerConfig::default())
        };
        config.validate()?;
        Ok(config)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        self.data.synthetic.clone().unwrap_or_default()
    }

    /// The feature schema: inline, from `schema_path`, or implied by the
    /// synthetic generator.
    pub fn resolve_schema(&self) -> Result<FeatureSchema> {
        if let Some(s) = &self.schema {
            return Ok(s.clone());
        }
        if let Some(p) = &self.data.schema_path {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read schema {}: {e}", p.display())))?;
            return serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid schema file: {e}")));
        }
        Ok(self.synthetic().schema())
    }

    /// Full validation without touching data files.
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let model = self.model_config()?;
        if self.data.train_path.is_none() {
            if self.data.test_path.is_some() {
                return Err(Error::Config("test_path given without train_path".into()));
            }
            self.synthetic().validate()?;
        }
        let schema = self.resolve_schema()?;
        schema.validate(model.quantizer.as_ref().map(|q| q.depth))?;
        if self.data.train_path.is_none() && schema != self.synthetic().schema() {
            return Err(Error::Config(
                "schema does not match the synthetic generator; give train_path for custom schemas".into(),
            ));
        }
        Ok(())
    }

    /// Loads CSV splits, or generates the synthetic dataset.
    pub fn load_data(&self) -> Result<LoadedData> {
        let schema = self.resolve_schema()?;
        match &self.data.train_path {
            Some(train_path) => {
                let (train, dicts) = load_csv(&schema, train_path, None)?;
                let test = match &self.data.test_path {
                    Some(p) => Some(load_csv(&schema, p, Some(&dicts))?.0),
                    None => None,
                };
                Ok(LoadedData {
                    schema,
                    train,
                    test,
                    dictionaries: Some(dicts),
                })
            }
            None => {
                let data = generate_synthetic(&self.synthetic())?;
                Ok(LoadedData {
                    schema: data.schema,
                    train: data.train,
                    test: Some(data.test),
                    dictionaries: None,
                })
            }
        }
    }
}
