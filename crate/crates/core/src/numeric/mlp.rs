//! Dense feed-forward networks with an explicit forward cache and a manual
//! backward pass.

use serde::{Deserialize, Serialize};

use super::activation::{Activation, OutputActivation};
use super::params::{join, Params};
use super::Matrix;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// One affine layer `y = act(x·W + b)` with `W` shaped `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: &[f64], activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape("Layer::new bias", weight.cols(), bias.len()));
        }
        Ok(Self {
            weight,
            bias: Matrix::row_vector(bias),
            activation,
        })
    }

    pub fn glorot(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        Self {
            weight: Matrix::glorot(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            activation: self.activation,
        }
    }

    /// `x·W + b`, without the activation.
    pub fn affine(&self, input: &Matrix) -> Result<Matrix> {
        let mut pre = input.matmul(&self.weight)?;
        pre.add_row_broadcast(self.bias.as_slice());
        Ok(pre)
    }
}

impl Params for Layer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub output_activation: OutputActivation,
}

impl MlpParams {
    /// Glorot-initialised network `input -> widths[0] -> ... -> widths[last]`.
    /// Every layer uses `hidden`, except the last which uses `last`.
    pub fn new(
        input: usize,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        output_activation: OutputActivation,
        rng: &mut SeededRng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let act = if i + 1 == widths.len() { last } else { hidden };
            layers.push(Layer::glorot(fan_in, w, act, rng));
            fan_in = w;
        }
        Self {
            layers,
            output_activation,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, output_activation: OutputActivation) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("mlp layer {}", i + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self {
            layers,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            output_activation: self.output_activation,
        }
    }
}

impl Params for MlpParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.layers.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.layers.visit_mut(prefix, out);
    }
}

/// Activations recorded by [`mlp_forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer (`inputs[0]` is the network input).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    /// Final output after the output activation.
    output: Matrix,
}

impl MlpCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }

    /// Appends the on/off state of every ReLU unit. Two evaluations with the
    /// same pattern lie on the same smooth piece of the network.
    pub fn relu_pattern(&self, params: &MlpParams, out: &mut Vec<bool>) {
        for (layer, pre) in params.layers.iter().zip(&self.pre) {
            if layer.activation == Activation::Relu {
                out.extend(pre.as_slice().iter().map(|&z| z > 0.0));
            }
        }
    }
}

pub fn mlp_forward(params: &MlpParams, input: &Matrix) -> Result<(Matrix, MlpCache)> {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut current = input.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        if current.cols() != layer.in_dim() {
            return Err(Error::shape(
                format!("mlp layer {i} input"),
                layer.in_dim(),
                current.cols(),
            ));
        }
        let z = layer.affine(&current)?;
        let act = layer.activation;
        let a = z.map(|v| act.apply(v));
        inputs.push(current);
        pre.push(z);
        current = a;
    }
    let out_act = params.output_activation;
    let output = current.map(|v| out_act.apply(v));
    if inputs.is_empty() {
        inputs.push(input.clone());
    }
    let cache = MlpCache {
        inputs,
        pre,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// Returns gradients shaped like `params` and the gradient wrt the input.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    upstream: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    if cache.pre.len() != params.layers.len() {
        return Err(Error::Usage(format!(
            "mlp cache holds {} layers, network has {}",
            cache.pre.len(),
            params.layers.len()
        )));
    }
    if upstream.shape() != cache.output.shape() {
        return Err(Error::shape(
            "mlp_backward upstream",
            format!("{:?}", cache.output.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let out_act = params.output_activation;
    let mut grad = upstream.clone();
    if out_act != OutputActivation::None {
        for (g, &y) in grad.as_mut_slice().iter_mut().zip(cache.output.as_slice()) {
            *g *= out_act.derivative_from_output(y);
        }
    }

    let mut grads = params.zeros_like();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let act = layer.activation;
        if act != Activation::None {
            for (g, &z) in grad.as_mut_slice().iter_mut().zip(cache.pre[i].as_slice()) {
                *g *= act.derivative(z);
            }
        }
        grads.layers[i].weight = cache.inputs[i].t_matmul(&grad)?;
        grads.layers[i].bias = grad.column_sums();
        grad = grad.matmul_t(&layer.weight)?;
    }
    Ok((grads, grad))
}
