//! The assembled network: embeddings, optional quantizer, backbone.

use serde::{Deserialize, Serialize};

use crate::backbones::{
    backbone_backward, backbone_forward, Backbone, BackboneCache, BackboneConfig, BackboneKind, GateInput,
};
use crate::data::Dictionaries;
use crate::embedding::{
    dense_embedding_gradients, embed_batch, embedding_gradients, Embedded, EmbeddingTables, ExampleBatch,
    FeatureSchema,
};
use crate::error::{Error, Result};
use crate::hmdrr::{rq_backward, rq_quantize, QuantizeOutput, Quantizer, QuantizerConfig, QuantizerParams, StopGradients};
use crate::numeric::params::join;
use crate::numeric::{gradcheck, GradReport, Matrix, Params, Probe};
use crate::rng::SeededRng;
use crate::train::{cross_entropy_grad, total_loss};

const MODEL_STREAM: u64 = 10;

/// Architecture choices that determine the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Present exactly when the gate reads the hierarchical representation.
    pub quantizer: Option<QuantizerConfig>,
}

impl ModelConfig {
    /// Resolves the effective model: the quantizer is kept only for gated
    /// backbones reading `s_D`.
    pub fn new(backbone: BackboneConfig, quantizer: QuantizerConfig) -> Self {
        let uses_quantizer = backbone.kind != BackboneKind::Dnn && backbone.gate_input == GateInput::HierarchicalSd;
        Self {
            backbone,
            quantizer: uses_quantizer.then_some(quantizer),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let needs = self.backbone.kind != BackboneKind::Dnn && self.backbone.gate_input == GateInput::HierarchicalSd;
        match (&self.quantizer, needs) {
            (Some(q), true) => q.validate(),
            (None, false) => Ok(()),
            (None, true) => Err(Error::Config("gate input hierarchical_sD requires a quantizer".into())),
            (Some(_), false) => Err(Error::Config("quantizer configured but the gate does not read s_D".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub embeddings: EmbeddingTables,
    pub quantizer: Option<Quantizer>,
    pub backbone: Backbone,
    /// Encoding fitted on the training CSV, if the data came from one.
    pub dictionaries: Option<Dictionaries>,
}

/// Gradient container mirroring [`Model`]'s trainable blocks.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embeddings: EmbeddingTables,
    pub quantizer: Option<QuantizerParams>,
    pub backbone: Backbone,
}

impl Params for Model {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.embeddings.visit(&join(prefix, "embedding"), out);
        if let Some(q) = &self.quantizer {
            q.params.visit(&join(prefix, "quantizer"), out);
        }
        self.backbone.visit(&join(prefix, "backbone"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.embeddings.visit_mut(&join(prefix, "embedding"), out);
        if let Some(q) = &mut self.quantizer {
            q.params.visit_mut(&join(prefix, "quantizer"), out);
        }
        self.backbone.visit_mut(&join(prefix, "backbone"), out);
    }
}

impl Params for ModelGrads {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.embeddings.visit(&join(prefix, "embedding"), out);
        self.quantizer.visit(&join(prefix, "quantizer"), out);
        self.backbone.visit(&join(prefix, "backbone"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.embeddings.visit_mut(&join(prefix, "embedding"), out);
        self.quantizer.visit_mut(&join(prefix, "quantizer"), out);
        self.backbone.visit_mut(&join(prefix, "backbone"), out);
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embedded: Embedded,
    pub quantized: Option<QuantizeOutput>,
    pub y_hat: Vec<f64>,
    pub cache: BackboneCache,
}

impl ForwardPass {
    pub fn l_rq(&self) -> f64 {
        self.quantized.as_ref().map_or(0.0, |q| q.l_rq)
    }

    pub fn relu_pattern(&self, model: &Model) -> Vec<bool> {
        self.cache.relu_pattern(&model.backbone)
    }
}

impl Model {
    pub fn new(schema: FeatureSchema, config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let depth = config.quantizer.as_ref().map(|q| q.depth);
        schema.validate(depth)?;
        let embeddings = EmbeddingTables::new(&schema, rng);
        let quantizer = config
            .quantizer
            .clone()
            .map(|q| Quantizer::new(q, &schema, rng))
            .transpose()?;
        let gate_dim = match (&quantizer, config.backbone.kind) {
            (_, BackboneKind::Dnn) => 0,
            (Some(q), _) => q.code_dim,
            (None, _) => schema.xb_dim(),
        };
        let backbone = Backbone::new(&config.backbone, schema.x_dim(), gate_dim, rng)?;
        Ok(Self {
            schema,
            config,
            embeddings,
            quantizer,
            backbone,
            dictionaries: None,
        })
    }

    /// Forward pass. `frozen` evaluates the quantizer's straight-through
    /// surrogate around a previously captured point (used by gradcheck).
    /// Builds a model whose initial weights depend only on `seed`.
    pub fn seeded(schema: FeatureSchema, config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(schema, config, &mut SeededRng::derive(seed, MODEL_STREAM))
    }

    pub fn forward(&self, batch: &ExampleBatch, frozen: Option<&StopGradients>) -> Result<ForwardPass> {
        let embedded = embed_batch(&self.schema, &self.embeddings, batch)?;
        let quantized = match &self.quantizer {
            Some(q) => Some(rq_quantize(q, &embedded.x_b, frozen)?),
            None => None,
        };
        let gate_input = match (&quantized, self.backbone.kind()) {
            (_, BackboneKind::Dnn) => None,
            (Some(q), _) => Some(&q.s_d),
            (None, _) => Some(&embedded.x_b),
        };
        let (y_hat, cache) = backbone_forward(&self.backbone, &embedded.x, gate_input)?;
        Ok(ForwardPass {
            embedded,
            quantized,
            y_hat,
            cache,
        })
    }

    /// `L_ce + alpha * L_rq` for a completed forward pass.
    pub fn loss(&self, batch: &ExampleBatch, pass: &ForwardPass, alpha: f64) -> f64 {
        total_loss(&pass.y_hat, &batch.labels, pass.l_rq(), alpha)
    }

    /// Gradients of `L_ce + alpha * L_rq` for every trainable block.
    pub fn backward(&self, batch: &ExampleBatch, pass: &ForwardPass, alpha: f64) -> Result<ModelGrads> {
        let grad_y = cross_entropy_grad(&pass.y_hat, &batch.labels);
        let bb = backbone_backward(&self.backbone, &pass.cache, &grad_y)?;
        let n = batch.len();
        let map = &pass.embedded.slice_map;
        let (quantizer, grad_xb) = match (&self.quantizer, &pass.quantized) {
            (Some(q), Some(out)) => {
                let grad_sd = bb.grad_gate.as_ref().ok_or_else(|| Error::Usage("missing gate gradient".into()))?;
                let g = rq_backward(q, out, grad_sd, alpha)?;
                (Some(g.params), g.grad_xb)
            }
            (None, None) => (None, bb.grad_gate.clone().unwrap_or_else(|| Matrix::zeros(n, map.xb_dim))),
            _ => return Err(Error::Usage("forward pass does not match the model's quantizer".into())),
        };
        let sparse = embedding_gradients(&self.schema, batch, &bb.grad_x, &grad_xb, map)?;
        Ok(ModelGrads {
            embeddings: dense_embedding_gradients(&self.embeddings, &sparse),
            quantizer,
            backbone: bb.params,
        })
    }

    /// Seeds codebooks from `batch` unless already done.
    pub fn ensure_codebooks(&mut self, batch: &ExampleBatch, rng: &mut SeededRng) -> Result<()> {
        let needs = self.quantizer.as_ref().is_some_and(|q| !q.initialized);
        if needs {
            let embedded = embed_batch(&self.schema, &self.embeddings, batch)?;
            if let Some(q) = &mut self.quantizer {
                q.initialize_from(&embedded.x_b, rng)?;
            }
        }
        Ok(())
    }

    /// Keeps the frozen zero code at zero in every codebook.
    pub(crate) fn enforce_frozen_rows(&mut self) {
        if let Some(q) = &mut self.quantizer {
            if q.config.include_zero_code {
                for cb in &mut q.params.codebooks {
                    cb.row_mut(0).fill(0.0);
                }
            }
        }
    }

    pub fn codebooks(&self) -> Option<&[Matrix]> {
        self.quantizer.as_ref().map(|q| q.params.codebooks.as_slice())
    }
}

/// Finite-difference check of [`Model::backward`] on `batch`.
///
/// With `freeze_codes` the quantizer runs as its straight-through surrogate
/// around the unperturbed point, so only ReLU kinks are excluded. Without it
/// the true forward pass is differenced and coordinates whose perturbation
/// flips any code are excluded as well.
pub fn model_gradcheck(
    model: &mut Model,
    batch: &ExampleBatch,
    alpha: f64,
    freeze_codes: bool,
    step: f64,
    tolerance: f64,
) -> Result<GradReport> {
    let base = model.forward(batch, None)?;
    let grads = model.backward(batch, &base, alpha)?;
    let stops = base.quantized.as_ref().map(|q| q.stop_gradients());
    let base_codes = base.quantized.as_ref().map(|q| q.codes.clone());
    let base_pattern = base.relu_pattern(model);
    let frozen = if freeze_codes { stops.as_ref() } else { None };
    let probe = |m: &Model| -> Probe {
        match m.forward(batch, frozen) {
            Ok(pass) => {
                let flipped = !freeze_codes && pass.quantized.as_ref().map(|q| &q.codes) != base_codes.as_ref();
                Probe {
                    loss: m.loss(batch, &pass, alpha),
                    crossed_boundary: flipped || pass.relu_pattern(m) != base_pattern,
                }
            }
            Err(_) => Probe::value(f64::NAN),
        }
    };
    gradcheck(probe, &grads, model, step, tolerance)
}
