//! Prediction heads: mixture-of-experts with a softmax gate, dynamic-weight
//! scaling of the bottom embeddings, and a plain DNN baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::activation::softmax_in_place;
use crate::numeric::params::join;
use crate::numeric::{
    mlp_backward, mlp_forward, Activation, Matrix, MlpCache, MlpParams, OutputActivation, Params,
};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Moe,
    Dw,
    Dnn,
}

/// What the gate of a MoE / DW backbone reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateInput {
    /// The hierarchical vector produced by the quantizer.
    #[serde(rename = "hierarchical_sD", alias = "hierarchical_sd")]
    HierarchicalSd,
    /// The distribution embedding itself.
    #[serde(rename = "raw_xb")]
    RawXb,
}

fn default_widths() -> Vec<usize> {
    vec![128, 64, 32]
}

fn default_gate_input() -> GateInput {
    GateInput::HierarchicalSd
}

fn default_experts() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Ignored by the DNN.
    #[serde(default = "default_gate_input")]
    pub gate_input: GateInput,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    /// Expert, tower and DNN hidden widths.
    #[serde(default = "default_widths")]
    pub hidden: Vec<usize>,
    /// GateNU hidden width; defaults to `ceil(dim(x) / 2)`.
    #[serde(default)]
    pub gate_hidden: Option<usize>,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            gate_input: default_gate_input(),
            n_experts: default_experts(),
            hidden: default_widths(),
            gate_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 1 {
            return Err(Error::Config("n_experts must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be non-empty and positive".into()));
        }
        if self.gate_hidden == Some(0) {
            return Err(Error::Config("gate_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEParams {
    pub experts: Vec<MlpParams>,
    /// `gate_dim x n_experts`.
    pub gate: Matrix,
    /// `expert_out -> 1`, sigmoid.
    pub tower: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwParams {
    /// `gate_dim -> hidden -> dim(x)`, output `2·sigmoid`.
    pub gate_nu: MlpParams,
    /// `dim(x) -> hidden... -> 1`, sigmoid.
    pub tower: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Moe(MoEParams),
    Dw(DwParams),
    Dnn(MlpParams),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, x_dim: usize, gate_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let hidden = &config.hidden;
        let with_head = |rng: &mut SeededRng| {
            let mut widths = hidden.clone();
            widths.push(1);
            MlpParams::new(x_dim, &widths, Activation::Relu, Activation::None, OutputActivation::Sigmoid, rng)
        };
        Ok(match config.kind {
            BackboneKind::Moe => {
                let experts = (0..config.n_experts)
                    .map(|_| MlpParams::new(x_dim, hidden, Activation::Relu, Activation::Relu, OutputActivation::None, rng))
                    .collect();
                let gate = Matrix::glorot(gate_dim, config.n_experts, rng);
                let out = *hidden.last().expect("validated");
                let tower = MlpParams::new(out, &[1], Activation::None, Activation::None, OutputActivation::Sigmoid, rng);
                Backbone::Moe(MoEParams { experts, gate, tower })
            }
            BackboneKind::Dw => {
                let width = config.gate_hidden.unwrap_or(x_dim.div_ceil(2));
                let gate_nu = MlpParams::new(
                    gate_dim,
                    &[width, x_dim],
                    Activation::Relu,
                    Activation::None,
                    OutputActivation::TwoSigmoid,
                    rng,
                );
                Backbone::Dw(DwParams {
                    gate_nu,
                    tower: with_head(rng),
                })
            }
            BackboneKind::Dnn => Backbone::Dnn(with_head(rng)),
        })
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Moe(_) => BackboneKind::Moe,
            Backbone::Dw(_) => BackboneKind::Dw,
            Backbone::Dnn(_) => BackboneKind::Dnn,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Backbone::Moe(p) => Backbone::Moe(MoEParams {
                experts: p.experts.iter().map(MlpParams::zeros_like).collect(),
                gate: p.gate.zeros_like(),
                tower: p.tower.zeros_like(),
            }),
            Backbone::Dw(p) => Backbone::Dw(DwParams {
                gate_nu: p.gate_nu.zeros_like(),
                tower: p.tower.zeros_like(),
            }),
            Backbone::Dnn(p) => Backbone::Dnn(p.zeros_like()),
        }
    }
}

impl Params for Backbone {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            Backbone::Moe(p) => {
                p.experts.visit(&join(prefix, "expert"), out);
                out.push((join(prefix, "gate"), &p.gate));
                p.tower.visit(&join(prefix, "tower"), out);
            }
            Backbone::Dw(p) => {
                p.gate_nu.visit(&join(prefix, "gate_nu"), out);
                p.tower.visit(&join(prefix, "tower"), out);
            }
            Backbone::Dnn(p) => p.visit(&join(prefix, "dnn"), out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        match self {
            Backbone::Moe(p) => {
                p.experts.visit_mut(&join(prefix, "expert"), out);
                out.push((join(prefix, "gate"), &mut p.gate));
                p.tower.visit_mut(&join(prefix, "tower"), out);
            }
            Backbone::Dw(p) => {
                p.gate_nu.visit_mut(&join(prefix, "gate_nu"), out);
                p.tower.visit_mut(&join(prefix, "tower"), out);
            }
            Backbone::Dnn(p) => p.visit_mut(&join(prefix, "dnn"), out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoeCache {
    gate_input: Matrix,
    /// Softmax gate weights, `batch x n`.
    pub gate_weights: Matrix,
    experts: Vec<MlpCache>,
    tower: MlpCache,
}

#[derive(Debug, Clone)]
pub struct DwCache {
    x: Matrix,
    /// `δ_b`, `batch x dim(x)`.
    pub delta: Matrix,
    gate_nu: MlpCache,
    tower: MlpCache,
}

#[derive(Debug, Clone)]
pub enum BackboneCache {
    Moe(MoeCache),
    Dw(DwCache),
    Dnn(MlpCache),
}

impl BackboneCache {
    pub fn relu_pattern(&self, backbone: &Backbone) -> Vec<bool> {
        let mut out = Vec::new();
        match (self, backbone) {
            (BackboneCache::Moe(c), Backbone::Moe(p)) => {
                for (ec, e) in c.experts.iter().zip(&p.experts) {
                    ec.relu_pattern(e, &mut out);
                }
                c.tower.relu_pattern(&p.tower, &mut out);
            }
            (BackboneCache::Dw(c), Backbone::Dw(p)) => {
                c.gate_nu.relu_pattern(&p.gate_nu, &mut out);
                c.tower.relu_pattern(&p.tower, &mut out);
            }
            (BackboneCache::Dnn(c), Backbone::Dnn(p)) => c.relu_pattern(p, &mut out),
            _ => {}
        }
        out
    }
}

fn column_vec(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, 0)).collect()
}

fn check_rows(context: &str, x: &Matrix, gate: &Matrix) -> Result<()> {
    if x.rows() != gate.rows() {
        return Err(Error::shape(format!("{context} gate rows"), x.rows(), gate.rows()));
    }
    Ok(())
}

/// `ŷ = sigmoid(tower(Σ_i softmax(g·W_g)_i E_i(x)))`.
pub fn moe_forward(params: &MoEParams, x: &Matrix, gate_input: &Matrix) -> Result<(Vec<f64>, MoeCache)> {
    check_rows("moe_forward", x, gate_input)?;
    if gate_input.cols() != params.gate.rows() {
        return Err(Error::shape("moe_forward gate input", params.gate.rows(), gate_input.cols()));
    }
    let mut weights = gate_input.matmul(&params.gate)?;
    for r in 0..weights.rows() {
        softmax_in_place(weights.row_mut(r));
    }
    let mut combined: Option<Matrix> = None;
    let mut caches = Vec::with_capacity(params.experts.len());
    for (i, expert) in params.experts.iter().enumerate() {
        let (out, cache) = mlp_forward(expert, x)?;
        let acc = combined.get_or_insert_with(|| out.zeros_like());
        for r in 0..out.rows() {
            let w = weights.get(r, i);
            for (a, v) in acc.row_mut(r).iter_mut().zip(out.row(r)) {
                *a += w * v;
            }
        }
        caches.push(cache);
    }
    let combined = combined.ok_or_else(|| Error::Config("mixture has no experts".into()))?;
    let (y, tower) = mlp_forward(&params.tower, &combined)?;
    Ok((
        column_vec(&y),
        MoeCache {
            gate_input: gate_input.clone(),
            gate_weights: weights,
            experts: caches,
            tower,
        },
    ))
}

/// `δ_b = 2·sigmoid(GateNU(g))`, `ŷ = tower(δ_b ⊗ x)`.
pub fn dw_forward(params: &DwParams, x: &Matrix, gate_input: &Matrix) -> Result<(Vec<f64>, DwCache)> {
    check_rows("dw_forward", x, gate_input)?;
    if params.gate_nu.output_dim() != x.cols() {
        return Err(Error::shape("dw_forward gate output", x.cols(), params.gate_nu.output_dim()));
    }
    let (delta, gate_nu) = mlp_forward(&params.gate_nu, gate_input)?;
    let scaled = delta.hadamard(x)?;
    let (y, tower) = mlp_forward(&params.tower, &scaled)?;
    Ok((
        column_vec(&y),
        DwCache {
            x: x.clone(),
            delta,
            gate_nu,
            tower,
        },
    ))
}

pub fn dnn_forward(params: &MlpParams, x: &Matrix) -> Result<(Vec<f64>, MlpCache)> {
    let (y, cache) = mlp_forward(params, x)?;
    if y.cols() != 1 {
        return Err(Error::shape("dnn_forward output", 1, y.cols()));
    }
    Ok((column_vec(&y), cache))
}

/// Dispatches on the backbone kind. `gate_input` is ignored by the DNN.
pub fn backbone_forward(
    backbone: &Backbone,
    x: &Matrix,
    gate_input: Option<&Matrix>,
) -> Result<(Vec<f64>, BackboneCache)> {
    let gate = || gate_input.ok_or_else(|| Error::Usage("gated backbone needs a gate input".into()));
    match backbone {
        Backbone::Moe(p) => moe_forward(p, x, gate()?).map(|(y, c)| (y, BackboneCache::Moe(c))),
        Backbone::Dw(p) => dw_forward(p, x, gate()?).map(|(y, c)| (y, BackboneCache::Dw(c))),
        Backbone::Dnn(p) => dnn_forward(p, x).map(|(y, c)| (y, BackboneCache::Dnn(c))),
    }
}

#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub params: Backbone,
    pub grad_x: Matrix,
    /// `None` for the DNN.
    pub grad_gate: Option<Matrix>,
}

pub fn backbone_backward(backbone: &Backbone, cache: &BackboneCache, grad_y: &[f64]) -> Result<BackboneGrads> {
    let upstream = Matrix::from_vec(grad_y.len(), 1, grad_y.to_vec())?;
    match (backbone, cache) {
        (Backbone::Moe(p), BackboneCache::Moe(c)) => {
            let (tower, grad_combined) = mlp_backward(&p.tower, &c.tower, &upstream)?;
            let n = grad_combined.rows();
            let mut grad_x: Option<Matrix> = None;
            let mut grad_w = Matrix::zeros(n, p.experts.len());
            let mut experts = Vec::with_capacity(p.experts.len());
            for (i, (expert, ec)) in p.experts.iter().zip(&c.experts).enumerate() {
                let out = ec.output();
                let mut up = grad_combined.clone();
                for r in 0..n {
                    let w = c.gate_weights.get(r, i);
                    grad_w.set(r, i, crate::numeric::matrix::dot(grad_combined.row(r), out.row(r)));
                    for v in up.row_mut(r) {
                        *v *= w;
                    }
                }
                let (g, gx) = mlp_backward(expert, ec, &up)?;
                match &mut grad_x {
                    Some(acc) => acc.add_assign(&gx),
                    None => grad_x = Some(gx),
                }
                experts.push(g);
            }
            // softmax backward, row by row
            let mut grad_logits = grad_w;
            for r in 0..n {
                let w = c.gate_weights.row(r);
                let row = grad_logits.row_mut(r);
                let inner = crate::numeric::matrix::dot(w, row);
                for (g, &wi) in row.iter_mut().zip(w) {
                    *g = wi * (*g - inner);
                }
            }
            let gate = c.gate_input.t_matmul(&grad_logits)?;
            let grad_gate = grad_logits.matmul_t(&p.gate)?;
            Ok(BackboneGrads {
                params: Backbone::Moe(MoEParams { experts, gate, tower }),
                grad_x: grad_x.expect("at least one expert"),
                grad_gate: Some(grad_gate),
            })
        }
        (Backbone::Dw(p), BackboneCache::Dw(c)) => {
            let (tower, grad_scaled) = mlp_backward(&p.tower, &c.tower, &upstream)?;
            let grad_x = grad_scaled.hadamard(&c.delta)?;
            let grad_delta = grad_scaled.hadamard(&c.x)?;
            let (gate_nu, grad_gate) = mlp_backward(&p.gate_nu, &c.gate_nu, &grad_delta)?;
            Ok(BackboneGrads {
                params: Backbone::Dw(DwParams { gate_nu, tower }),
                grad_x,
                grad_gate: Some(grad_gate),
            })
        }
        (Backbone::Dnn(p), BackboneCache::Dnn(c)) => {
            let (g, grad_x) = mlp_backward(p, c, &upstream)?;
            Ok(BackboneGrads {
                params: Backbone::Dnn(g),
                grad_x,
                grad_gate: None,
            })
        }
        (b, _) => Err(Error::Usage(format!("{:?} backbone given a cache from another kind", b.kind()))),
    }
}
