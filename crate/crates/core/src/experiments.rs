//! Multi-seed comparison drivers: the model ablation and the depth sweep.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, BackboneKind, GateInput};
use crate::embedding::{ExampleBatch, FeatureSchema};
use crate::error::{Error, Result};
use crate::hmdrr::{explicit_level_count, ExtractionMode, QuantizerConfig};
use crate::model::{Model, ModelConfig};
use crate::train::{fit, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// The compared model families, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dnn,
    VanillaMoe,
    HmdnMoeImplicit,
    HmdnMoeExplicit,
    VanillaDw,
    HmdnDw,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Dnn,
        Variant::VanillaMoe,
        Variant::HmdnMoeImplicit,
        Variant::HmdnMoeExplicit,
        Variant::VanillaDw,
        Variant::HmdnDw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dnn => "dnn",
            Variant::VanillaMoe => "vanilla-moe",
            Variant::HmdnMoeImplicit => "hmdn-moe-implicit",
            Variant::HmdnMoeExplicit => "hmdn-moe-explicit",
            Variant::VanillaDw => "vanilla-dw",
            Variant::HmdnDw => "hmdn-dw",
        }
    }

    /// Resolves the variant against base backbone and quantizer settings.
    /// The explicit variant uses one level per distribution type.
    pub fn model_config(
        self,
        backbone: &BackboneConfig,
        quantizer: &QuantizerConfig,
        schema: &FeatureSchema,
    ) -> ModelConfig {
        let (kind, gate, mode) = match self {
            Variant::Dnn => (BackboneKind::Dnn, GateInput::RawXb, None),
            Variant::VanillaMoe => (BackboneKind::Moe, GateInput::RawXb, None),
            Variant::HmdnMoeImplicit => (BackboneKind::Moe, GateInput::HierarchicalSd, Some(ExtractionMode::Implicit)),
            Variant::HmdnMoeExplicit => (BackboneKind::Moe, GateInput::HierarchicalSd, Some(ExtractionMode::Explicit)),
            Variant::VanillaDw => (BackboneKind::Dw, GateInput::RawXb, None),
            Variant::HmdnDw => (BackboneKind::Dw, GateInput::HierarchicalSd, Some(ExtractionMode::Implicit)),
        };
        let b = BackboneConfig {
            kind,
            gate_input: gate,
            ..backbone.clone()
        };
        let mut q = quantizer.clone();
        if let Some(mode) = mode {
            q.mode = mode;
            if mode == ExtractionMode::Explicit {
                q.depth = explicit_level_count(schema);
            } else {
                q.code_dim = None;
            }
        }
        ModelConfig::new(b, q)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown model `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// Shared inputs of every run in an experiment.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub schema: &'a FeatureSchema,
    pub train: &'a ExampleBatch,
    pub test: &'a ExampleBatch,
    pub backbone: BackboneConfig,
    pub quantizer: QuantizerConfig,
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Experiment<'_> {
    fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.training.validate()?;
        self.backbone.validate()?;
        self.quantizer.validate()
    }

    /// Test AUC per seed. Seeds drive weight init, shuffling and codebook
    /// seeding; the data is shared.
    pub fn run_seeds(&self, config: &ModelConfig) -> Result<Vec<f64>> {
        let mut aucs = Vec::with_capacity(self.seeds.len());
        for &seed in &self.seeds {
            let model = Model::seeded(self.schema.clone(), config.clone(), seed)?;
            let training = TrainConfig {
                seed,
                ..self.training.clone()
            };
            let outcome = fit(model, self.train, Some(self.test), &training, &mut |_| {})?;
            aucs.push(outcome.test.expect("test split given").auc);
        }
        Ok(aucs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SeedSummary {
    pub fn new(aucs: Vec<f64>) -> Self {
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let min = aucs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { aucs, mean, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: Variant,
    pub auc: SeedSummary,
    /// Percent change of mean AUC over the DNN row, when that row exists.
    pub rela_impr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == v)
    }
}

pub fn rela_impr(auc: f64, baseline: f64) -> f64 {
    (auc - baseline) / baseline * 100.0
}

/// Trains each requested variant over every seed. Rows follow
/// [`Variant::ALL`] order regardless of request order.
pub fn run_ablation(exp: &Experiment<'_>, variants: &[Variant]) -> Result<AblationTable> {
    exp.check()?;
    let selected: BTreeSet<Variant> = variants.iter().copied().collect();
    if selected.is_empty() {
        return Err(Error::Config("no models selected".into()));
    }
    if selected.len() != variants.len() {
        return Err(Error::Config("duplicate model in selection".into()));
    }
    let mut rows = Vec::new();
    for v in Variant::ALL.into_iter().filter(|v| selected.contains(v)) {
        let config = v.model_config(&exp.backbone, &exp.quantizer, exp.schema);
        config.validate()?;
        rows.push(AblationRow {
            model: v,
            auc: SeedSummary::new(exp.run_seeds(&config)?),
            rela_impr: None,
        });
    }
    if let Some(base) = rows.iter().find(|r| r.model == Variant::Dnn).map(|r| r.auc.mean) {
        for r in &mut rows {
            r.rela_impr = Some(rela_impr(r.auc.mean, base));
        }
    }
    Ok(AblationTable {
        seeds: exp.seeds.clone(),
        rows,
    })
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model")?;
        for s in &self.seeds {
            write!(f, "\tauc_seed{s}")?;
        }
        writeln!(f, "\tauc_mean\tauc_min\tauc_max\trela_impr_pct")?;
        for r in &self.rows {
            write!(f, "{}", r.model)?;
            for a in &r.auc.aucs {
                write!(f, "\t{a:.6}")?;
            }
            write!(f, "\t{:.6}\t{:.6}\t{:.6}", r.auc.mean, r.auc.min, r.auc.max)?;
            match r.rela_impr {
                Some(p) => writeln!(f, "\t{p:+.2}")?,
                None => writeln!(f, "\t-")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub auc: SeedSummary,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<DepthRow>,
}

impl DepthTable {
    pub fn mean_auc(&self, depth: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.depth == depth).map(|r| r.auc.mean)
    }
}

/// Trains the experiment's quantized model at each depth. Rows keep the
/// requested order.
pub fn run_depth_sweep(exp: &Experiment<'_>, depths: &[usize]) -> Result<DepthTable> {
    exp.check()?;
    if depths.is_empty() {
        return Err(Error::Config("depth list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for &d in depths {
        if d == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if !seen.insert(d) {
            return Err(Error::Config(format!("duplicate depth {d} in sweep")));
        }
    }
    if exp.backbone.kind == BackboneKind::Dnn || exp.backbone.gate_input != GateInput::HierarchicalSd {
        return Err(Error::Config(
            "depth sweep needs a quantizer: use a moe or dw backbone with gate_input hierarchical_sD".into(),
        ));
    }
    if exp.quantizer.mode == ExtractionMode::Explicit {
        return Err(Error::Config(
            "explicit extraction fixes the depth to the number of distribution types".into(),
        ));
    }
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let q = QuantizerConfig {
            depth,
            ..exp.quantizer.clone()
        };
        let config = ModelConfig::new(exp.backbone.clone(), q);
        config.validate()?;
        let start = Instant::now();
        let aucs = exp.run_seeds(&config)?;
        rows.push(DepthRow {
            depth,
            auc: SeedSummary::new(aucs),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(DepthTable {
        seeds: exp.seeds.clone(),
        rows,
    })
}

impl fmt::Display for DepthTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "depth\tauc_mean\tauc_min\tauc_max\tseconds")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.2}",
                r.depth, r.auc.mean, r.auc.min, r.auc.max, r.seconds
            )?;
        }
        Ok(())
    }
}
