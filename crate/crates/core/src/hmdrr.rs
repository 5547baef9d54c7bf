//! Hierarchical representation refining: multi-level residual quantization of
//! the distribution embedding `x_b`.
//!
//! Each level `d` owns a `K x z` codebook. In implicit mode level `d`
//! quantizes the residual left by levels `1..d`; in explicit mode level `d`
//! quantizes a linear projection of its own feature slice of `x_b`. The
//! hierarchical vector `s_D` is the sum of the selected code embeddings.
//!
//! Gradients follow the straight-through convention: the task gradient on
//! `s_D` is passed to the quantizer inputs unchanged, codebooks learn only
//! from the codebook term of the quantization loss and the inputs only from
//! the commitment term. Residuals subtract the stopped code embedding, so no
//! gradient reaches earlier codebooks through the residual chain.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::embedding::FeatureSchema;
use crate::error::{Error, Result};
use crate::numeric::matrix::squared_distance;
use crate::numeric::params::join;
use crate::numeric::{Activation, Layer, Matrix, Params};
use crate::rng::SeededRng;

const FALLBACK_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub depth: usize,
    pub codebook_size: usize,
    /// Code dimension. Implicit mode requires `dim(x_b)`; `None` picks it.
    pub code_dim: Option<usize>,
    pub mode: ExtractionMode,
    pub beta: f64,
    /// Reserve a frozen all-zero row 0 in every codebook.
    pub include_zero_code: bool,
    pub restart_dead_codes_every: Option<usize>,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            codebook_size: 64,
            code_dim: None,
            mode: ExtractionMode::Implicit,
            beta: 0.25,
            include_zero_code: false,
            restart_dead_codes_every: None,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("quantizer depth must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if self.code_dim == Some(0) {
            return Err(Error::Config("code_dim must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.restart_dead_codes_every == Some(0) {
            return Err(Error::Config("restart_dead_codes_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Column ranges of `x_b` feeding each explicit level.
pub type LevelLayout = Vec<Vec<Range<usize>>>;

/// Assigns distribution features to explicit levels: `explicit_level` when
/// given, otherwise distribution types in order of first appearance.
pub fn explicit_layout(schema: &FeatureSchema, depth: usize) -> Result<LevelLayout> {
    let map = schema.slice_map();
    let mut types: Vec<&str> = Vec::new();
    let mut levels: LevelLayout = vec![Vec::new(); depth];
    for entry in &map.entries {
        let f = &schema.features[entry.feature];
        let Some(cols) = &entry.xb_cols else { continue };
        let level = match f.explicit_level {
            Some(l) => l,
            None => {
                let kind = f.distribution_type.as_deref().unwrap_or(f.name.as_str());
                match types.iter().position(|t| *t == kind) {
                    Some(p) => p + 1,
                    None => {
                        types.push(kind);
                        types.len()
                    }
                }
            }
        };
        if level < 1 || level > depth {
            return Err(Error::Config(format!(
                "feature `{}` maps to explicit level {level}, depth is {depth}",
                f.name
            )));
        }
        levels[level - 1].push(cols.clone());
    }
    if let Some(empty) = levels.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "explicit level {} has no distribution feature assigned",
            empty + 1
        )));
    }
    Ok(levels)
}

/// Number of explicit levels the schema defines when no depth is forced.
pub fn explicit_level_count(schema: &FeatureSchema) -> usize {
    let mut types: Vec<&str> = Vec::new();
    let mut max_level = 0;
    for (_, f) in schema.distribution_features() {
        match f.explicit_level {
            Some(l) => max_level = max_level.max(l),
            None => {
                let kind = f.distribution_type.as_deref().unwrap_or(f.name.as_str());
                if !types.contains(&kind) {
                    types.push(kind);
                }
            }
        }
    }
    max_level.max(types.len())
}

fn gather_columns(x: &Matrix, ranges: &[Range<usize>]) -> Matrix {
    let width: usize = ranges.iter().map(|r| r.len()).sum();
    let mut out = Matrix::zeros(x.rows(), width);
    for r in 0..x.rows() {
        let src = x.row(r);
        let dst = out.row_mut(r);
        let mut o = 0;
        for range in ranges {
            dst[o..o + range.len()].copy_from_slice(&src[range.clone()]);
            o += range.len();
        }
    }
    out
}

fn scatter_add_columns(dst: &mut Matrix, src: &Matrix, ranges: &[Range<usize>]) {
    for r in 0..src.rows() {
        let s = src.row(r);
        let d = dst.row_mut(r);
        let mut o = 0;
        for range in ranges {
            for (k, c) in range.clone().enumerate() {
                d[c] += s[o + k];
            }
            o += range.len();
        }
    }
}

/// Trainable quantizer state: per-level codebooks and, in explicit mode,
/// per-level projections of the feature slices onto the code dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerParams {
    pub codebooks: Vec<Matrix>,
    pub projections: Vec<Layer>,
}

impl QuantizerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            codebooks: self.codebooks.iter().map(Matrix::zeros_like).collect(),
            projections: self
                .projections
                .iter()
                .map(|l| Layer {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

impl Params for QuantizerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.codebooks.visit(&join(prefix, "codebook"), out);
        self.projections.visit(&join(prefix, "projection"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.codebooks.visit_mut(&join(prefix, "codebook"), out);
        self.projections.visit_mut(&join(prefix, "projection"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    pub code_dim: usize,
    pub input_dim: usize,
    /// Explicit mode only.
    pub layout: Option<LevelLayout>,
    pub params: QuantizerParams,
    /// Codebooks are seeded from the first training batch.
    pub initialized: bool,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig, schema: &FeatureSchema, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let input_dim = schema.xb_dim();
        let (code_dim, layout) = match config.mode {
            ExtractionMode::Implicit => {
                let z = config.code_dim.unwrap_or(input_dim);
                if z != input_dim {
                    return Err(Error::Config(format!(
                        "implicit mode quantizes x_b directly: code_dim {z} must equal dim(x_b) {input_dim}"
                    )));
                }
                (z, None)
            }
            ExtractionMode::Explicit => (
                config.code_dim.unwrap_or(input_dim),
                Some(explicit_layout(schema, config.depth)?),
            ),
        };
        let projections = match &layout {
            Some(levels) => levels
                .iter()
                .map(|ranges| {
                    let width = ranges.iter().map(|r| r.len()).sum();
                    Layer::glorot(width, code_dim, Activation::None, rng)
                })
                .collect(),
            None => Vec::new(),
        };
        let mut codebooks: Vec<Matrix> = (0..config.depth)
            .map(|_| Matrix::gaussian(config.codebook_size, code_dim, FALLBACK_INIT_STD, rng))
            .collect();
        if config.include_zero_code {
            for cb in &mut codebooks {
                cb.row_mut(0).fill(0.0);
            }
        }
        Ok(Self {
            config,
            code_dim,
            input_dim,
            layout,
            params: QuantizerParams {
                codebooks,
                projections,
            },
            initialized: false,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    fn first_trainable_row(&self) -> usize {
        usize::from(self.config.include_zero_code)
    }

    /// Level-`d` input for explicit mode: the projected feature slice.
    fn explicit_input(&self, x_b: &Matrix, level: usize) -> Result<(Matrix, Matrix)> {
        let ranges = &self.layout.as_ref().expect("explicit layout")[level];
        let slice = gather_columns(x_b, ranges);
        let projected = self.params.projections[level].affine(&slice)?;
        Ok((slice, projected))
    }

    /// Seeds every level's codebook from that level's inputs on `x_b`
    /// (sampled with replacement); falls back to N(0, 0.1²) rows when the
    /// batch holds fewer than `K` examples.
    pub fn initialize_from(&mut self, x_b: &Matrix, rng: &mut SeededRng) -> Result<()> {
        self.check_input(x_b)?;
        let k = self.codebook_size();
        let start = self.first_trainable_row();
        let mut residual = x_b.clone();
        for d in 0..self.depth() {
            let input = match self.config.mode {
                ExtractionMode::Implicit => residual.clone(),
                ExtractionMode::Explicit => self.explicit_input(x_b, d)?.1,
            };
            let n = input.rows();
            let cb = &mut self.params.codebooks[d];
            for row in start..k {
                if n >= k {
                    cb.row_mut(row).copy_from_slice(input.row(rng.below(n)));
                } else {
                    for v in cb.row_mut(row) {
                        *v = rng.normal(0.0, FALLBACK_INIT_STD);
                    }
                }
            }
            if self.config.include_zero_code {
                cb.row_mut(0).fill(0.0);
            }
            if self.config.mode == ExtractionMode::Implicit {
                for r in 0..n {
                    let c = vq_nearest(residual.row(r), cb)?;
                    let e = cb.row(c).to_vec();
                    for (v, ev) in residual.row_mut(r).iter_mut().zip(&e) {
                        *v -= ev;
                    }
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Re-seeds rows with zero recorded usage from the current batch's
    /// level inputs. Returns how many rows were replaced.
    pub fn restart_dead_codes(
        &mut self,
        usage: &CodebookUsage,
        output: &QuantizeOutput,
        rng: &mut SeededRng,
    ) -> usize {
        let mut restarted = 0;
        let start = self.first_trainable_row();
        for d in 0..self.depth() {
            let inputs = &output.level_inputs[d];
            if inputs.rows() == 0 {
                continue;
            }
            for row in start..self.codebook_size() {
                if usage.counts[d][row] == 0 {
                    let src = inputs.row(rng.below(inputs.rows())).to_vec();
                    self.params.codebooks[d].row_mut(row).copy_from_slice(&src);
                    restarted += 1;
                }
            }
        }
        restarted
    }

    fn check_input(&self, x_b: &Matrix) -> Result<()> {
        if x_b.cols() != self.input_dim {
            return Err(Error::Config(format!(
                "quantizer expects x_b with {} columns, got {}",
                self.input_dim,
                x_b.cols()
            )));
        }
        Ok(())
    }
}

/// Nearest codebook row by squared Euclidean distance; ties go to the lowest
/// index.
pub fn vq_nearest(s: &[f64], codebook: &Matrix) -> Result<usize> {
    if codebook.rows() == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    if codebook.cols() != s.len() {
        return Err(Error::shape("vq_nearest", codebook.cols(), s.len()));
    }
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for c in 0..codebook.rows() {
        let dist = squared_distance(s, codebook.row(c));
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    Ok(best)
}

/// Values treated as constants by the quantizer's stop-gradient operator.
///
/// Passing these back into [`rq_quantize`] evaluates the straight-through
/// surrogate objective: codes stay fixed and every stopped quantity keeps its
/// captured value, so finite differences of the surrogate reproduce the
/// analytic straight-through gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGradients {
    pub codes: Vec<Vec<usize>>,
    pub selected: Vec<Matrix>,
    pub level_inputs: Vec<Matrix>,
    /// `s_D` minus the part that carries gradient to the inputs.
    pub straight_through: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutput {
    pub mode: ExtractionMode,
    /// `codes[d][i]`: code chosen at level `d + 1` for example `i`.
    pub codes: Vec<Vec<usize>>,
    /// Hierarchical representation, `batch x z`.
    pub s_d: Matrix,
    /// Quantizer input `r_0 = x_b`.
    pub input: Matrix,
    /// `x_b^(d)`: the vector quantized at each level.
    pub level_inputs: Vec<Matrix>,
    /// `e(c_d)` per level.
    pub selected: Vec<Matrix>,
    /// `r_d = x_b^(d) - e(c_d)` for `d = 1..D`.
    pub residuals: Vec<Matrix>,
    /// Explicit mode: unprojected feature slices per level.
    pub slices: Vec<Matrix>,
    pub l_rq: f64,
    /// True when evaluated with frozen codes that differ from the argmin.
    pub codes_flipped: bool,
}

impl QuantizeOutput {
    pub fn batch_size(&self) -> usize {
        self.s_d.rows()
    }

    pub fn depth(&self) -> usize {
        self.codes.len()
    }

    /// `(c_1, ..., c_D)` for one example.
    pub fn code_tuple(&self, example: usize) -> Vec<usize> {
        self.codes.iter().map(|level| level[example]).collect()
    }

    pub fn final_residual(&self) -> &Matrix {
        self.residuals.last().expect("depth >= 1")
    }

    pub fn stop_gradients(&self) -> StopGradients {
        let mut st = self.s_d.clone();
        match self.mode {
            ExtractionMode::Implicit => {
                for (s, x) in st.as_mut_slice().iter_mut().zip(self.input.as_slice()) {
                    *s -= x;
                }
            }
            ExtractionMode::Explicit => {
                for input in &self.level_inputs {
                    for (s, x) in st.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        *s -= x;
                    }
                }
            }
        }
        StopGradients {
            codes: self.codes.clone(),
            selected: self.selected.clone(),
            level_inputs: self.level_inputs.clone(),
            straight_through: st,
        }
    }
}

/// Runs the residual quantization chain over a batch of `x_b` rows.
pub fn rq_quantize(
    quantizer: &Quantizer,
    x_b: &Matrix,
    frozen: Option<&StopGradients>,
) -> Result<QuantizeOutput> {
    quantizer.check_input(x_b)?;
    let depth = quantizer.depth();
    let n = x_b.rows();
    let z = quantizer.code_dim;
    let beta = quantizer.config.beta;
    if let Some(f) = frozen {
        if f.codes.len() != depth || f.codes.iter().any(|c| c.len() != n) {
            return Err(Error::Usage("frozen codes do not match the batch".into()));
        }
    }

    let mut codes = Vec::with_capacity(depth);
    let mut level_inputs = Vec::with_capacity(depth);
    let mut selected = Vec::with_capacity(depth);
    let mut residuals = Vec::with_capacity(depth);
    let mut slices = Vec::new();
    let mut s_d = Matrix::zeros(n, z);
    let mut loss = 0.0;
    let mut flipped = false;
    let mut residual = x_b.clone();

    for d in 0..depth {
        let input = match quantizer.config.mode {
            ExtractionMode::Implicit => residual,
            ExtractionMode::Explicit => {
                let (slice, projected) = quantizer.explicit_input(x_b, d)?;
                slices.push(slice);
                projected
            }
        };
        let codebook = &quantizer.params.codebooks[d];
        let level_codes: Vec<usize> = match frozen {
            Some(f) => {
                for (r, &c) in f.codes[d].iter().enumerate() {
                    if vq_nearest(input.row(r), codebook)? != c {
                        flipped = true;
                    }
                }
                f.codes[d].clone()
            }
            None => (0..n)
                .map(|r| vq_nearest(input.row(r), codebook))
                .collect::<Result<_>>()?,
        };
        let e = codebook.gather_rows(&level_codes);
        let e_stopped = frozen.map_or(&e, |f| &f.selected[d]);
        let x_stopped = frozen.map_or(&input, |f| &f.level_inputs[d]);

        let mut next = input.clone();
        for (v, s) in next.as_mut_slice().iter_mut().zip(e_stopped.as_slice()) {
            *v -= s;
        }
        let codebook_term: f64 = e
            .as_slice()
            .iter()
            .zip(x_stopped.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let commitment_term: f64 = e_stopped
            .as_slice()
            .iter()
            .zip(input.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        loss += codebook_term + beta * commitment_term;

        if frozen.is_none() {
            s_d.add_assign(&e);
        }
        codes.push(level_codes);
        level_inputs.push(input);
        selected.push(e);
        residual = next.clone();
        residuals.push(next);
    }

    if let Some(f) = frozen {
        // surrogate: inputs + stopped (s_D - inputs)
        s_d = f.straight_through.clone();
        match quantizer.config.mode {
            ExtractionMode::Implicit => s_d.add_assign(x_b),
            ExtractionMode::Explicit => {
                for input in &level_inputs {
                    s_d.add_assign(input);
                }
            }
        }
    }

    let l_rq = if n == 0 { 0.0 } else { loss / n as f64 };
    Ok(QuantizeOutput {
        mode: quantizer.config.mode,
        codes,
        s_d,
        input: x_b.clone(),
        level_inputs,
        selected,
        residuals,
        slices,
        l_rq,
        codes_flipped: flipped,
    })
}

/// Batch-averaged quantization loss
/// `Σ_d ‖e(c_d) - sg[x^(d)]‖² + β Σ_d ‖sg[e(c_d)] - x^(d)‖²`.
pub fn rq_loss(output: &QuantizeOutput, beta: f64) -> f64 {
    let n = output.batch_size();
    if n == 0 {
        return 0.0;
    }
    let mut codebook_term = 0.0;
    let mut commitment_term = 0.0;
    for (e, x) in output.selected.iter().zip(&output.level_inputs) {
        let sq: f64 = e
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        codebook_term += sq;
        commitment_term += sq;
    }
    (codebook_term + beta * commitment_term) / n as f64
}

#[derive(Debug, Clone)]
pub struct RqGradients {
    pub params: QuantizerParams,
    pub grad_xb: Matrix,
}

/// Straight-through backward pass of [`rq_quantize`] for the objective
/// `task(s_D) + alpha * L_rq`.
pub fn rq_backward(
    quantizer: &Quantizer,
    output: &QuantizeOutput,
    grad_sd: &Matrix,
    alpha: f64,
) -> Result<RqGradients> {
    if grad_sd.shape() != output.s_d.shape() {
        return Err(Error::shape(
            "rq_backward grad_sD",
            format!("{:?}", output.s_d.shape()),
            format!("{:?}", grad_sd.shape()),
        ));
    }
    let n = output.batch_size();
    let beta = quantizer.config.beta;
    let mut grads = quantizer.params.zeros_like();
    let scale = if n == 0 { 0.0 } else { 2.0 * alpha / n as f64 };
    let start = quantizer.first_trainable_row();

    // grad wrt each level input from the commitment term
    let mut level_grads: Vec<Matrix> = Vec::with_capacity(output.depth());
    for d in 0..output.depth() {
        let e = &output.selected[d];
        let x = &output.level_inputs[d];
        let cb_grad = &mut grads.codebooks[d];
        let mut gx = Matrix::zeros(n, x.cols());
        if alpha != 0.0 {
            for (i, &c) in output.codes[d].iter().enumerate() {
                let er = e.row(i);
                let xr = x.row(i);
                if c >= start {
                    for (g, (a, b)) in cb_grad.row_mut(c).iter_mut().zip(er.iter().zip(xr)) {
                        *g += scale * (a - b);
                    }
                }
                for (g, (a, b)) in gx.row_mut(i).iter_mut().zip(xr.iter().zip(er)) {
                    *g = scale * beta * (a - b);
                }
            }
        }
        level_grads.push(gx);
    }

    let grad_xb = match output.mode {
        ExtractionMode::Implicit => {
            let mut g = grad_sd.clone();
            if alpha != 0.0 {
                for gx in &level_grads {
                    g.add_assign(gx);
                }
            }
            g
        }
        ExtractionMode::Explicit => {
            let layout = quantizer
                .layout
                .as_ref()
                .ok_or_else(|| Error::Usage("explicit output with implicit quantizer".into()))?;
            let mut g = Matrix::zeros(n, quantizer.input_dim);
            for (d, mut gx) in level_grads.into_iter().enumerate() {
                gx.add_assign(grad_sd);
                let proj = &quantizer.params.projections[d];
                grads.projections[d].weight = output.slices[d].t_matmul(&gx)?;
                grads.projections[d].bias = gx.column_sums();
                let grad_slice = gx.matmul_t(&proj.weight)?;
                scatter_add_columns(&mut g, &grad_slice, &layout[d]);
            }
            g
        }
    };
    Ok(RqGradients {
        params: grads,
        grad_xb,
    })
}

/// Per-level code usage accumulated over one or more batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub counts: Vec<Vec<u64>>,
}

impl CodebookUsage {
    pub fn new(depth: usize, codebook_size: usize) -> Self {
        Self {
            counts: vec![vec![0; codebook_size]; depth],
        }
    }

    pub fn record(&mut self, output: &QuantizeOutput) {
        for (level, codes) in self.counts.iter_mut().zip(&output.codes) {
            for &c in codes {
                level[c] += 1;
            }
        }
    }

    pub fn reset(&mut self) {
        for level in &mut self.counts {
            level.fill(0);
        }
    }

    pub fn total(&self, level: usize) -> u64 {
        self.counts[level].iter().sum()
    }

    /// Shannon entropy (nats) of the level's code distribution.
    pub fn entropy(&self, level: usize) -> f64 {
        let total = self.total(level) as f64;
        if total == 0.0 {
            return 0.0;
        }
        self.counts[level]
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .fold(0.0, |acc, h| acc + h)
    }

    pub fn dead_codes(&self, level: usize) -> usize {
        self.counts[level].iter().filter(|&&c| c == 0).count()
    }

    pub fn stats(&self) -> Vec<LevelUsage> {
        (0..self.counts.len())
            .map(|d| LevelUsage {
                level: d + 1,
                entropy: self.entropy(d),
                dead_codes: self.dead_codes(d),
                total: self.total(d),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelUsage {
    pub level: usize,
    pub entropy: f64,
    pub dead_codes: usize,
    pub total: u64,
}

/// Usage histogram over a sequence of quantizer outputs.
pub fn codebook_usage_stats<'a>(
    outputs: impl IntoIterator<Item = &'a QuantizeOutput>,
    codebook_size: usize,
) -> Result<CodebookUsage> {
    let mut iter = outputs.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::Usage("codebook usage needs at least one quantized batch".into()))?;
    let mut usage = CodebookUsage::new(first.depth(), codebook_size);
    for out in iter {
        usage.record(out);
    }
    Ok(usage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FeatureSpec;
    use crate::numeric::gradcheck::{gradcheck, Probe};
    use proptest::prelude::*;

    fn schema(dims: &[usize]) -> FeatureSchema {
        FeatureSchema {
            features: dims
                .iter()
                .enumerate()
                .map(|(i, &d)| FeatureSpec::new(format!("d{i}"), 3).with_dim(d).distribution(format!("t{i}")))
                .collect(),
            label_column: "y".into(),
        }
    }

    fn implicit(z: usize, depth: usize, k: usize, zero_code: bool, seed: u64) -> Quantizer {
        let cfg = QuantizerConfig {
            depth,
            codebook_size: k,
            include_zero_code: zero_code,
            ..QuantizerConfig::default()
        };
        Quantizer::new(cfg, &schema(&[z]), &mut SeededRng::new(seed)).unwrap()
    }

    fn explicit(dims: &[usize], z: usize, k: usize, seed: u64) -> Quantizer {
        let cfg = QuantizerConfig {
            depth: dims.len(),
            codebook_size: k,
            code_dim: Some(z),
            mode: ExtractionMode::Explicit,
            ..QuantizerConfig::default()
        };
        Quantizer::new(cfg, &schema(dims), &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn vq_examples() {
        let cb = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(vq_nearest(&[0.9, 0.8], &cb).unwrap(), 1);
        assert_eq!(vq_nearest(&[0.0, 0.0], &cb).unwrap(), 0);
        assert_eq!(vq_nearest(&[0.5, 0.5], &cb).unwrap(), 0);
        assert!(matches!(vq_nearest(&[0.5, 0.5], &Matrix::zeros(0, 2)), Err(Error::Config(_))));
        assert!(vq_nearest(&[0.5], &cb).is_err());
    }

    #[test]
    fn two_level_exact_reconstruction() {
        let mut q = implicit(2, 2, 2, false, 0);
        q.params.codebooks[0] = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        q.params.codebooks[1] = Matrix::from_rows(&[vec![0.0, 0.0], vec![-0.1, -0.2]]);
        let out = rq_quantize(&q, &Matrix::row_vector(&[0.9, 0.8]), None).unwrap();
        assert_eq!(out.code_tuple(0), vec![1, 1]);
        assert!((out.s_d.get(0, 0) - 0.9).abs() < 1e-15);
        assert!((out.s_d.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(out.final_residual().max_abs() < 1e-15);
    }

    #[test]
    fn single_level_exact_row() {
        let mut q = implicit(3, 1, 4, false, 1);
        let row = q.params.codebooks[0].row(2).to_vec();
        q.params.codebooks[0].row_mut(3).fill(9.0);
        let out = rq_quantize(&q, &Matrix::row_vector(&row), None).unwrap();
        assert_eq!(out.codes[0][0], 2);
        assert_eq!(out.s_d.row(0), &row[..]);
        assert_eq!(out.final_residual().max_abs(), 0.0);
    }

    #[test]
    fn greedy_chain_matches_step_by_step_oracle() {
        let mut rng = SeededRng::new(42);
        for trial in 0..50 {
            let q = implicit(4, 3, 8, false, trial);
            let x = Matrix::gaussian(5, 4, 0.3, &mut rng);
            let out = rq_quantize(&q, &x, None).unwrap();
            for i in 0..5 {
                let mut r = x.row(i).to_vec();
                let mut s = vec![0.0; 4];
                for d in 0..3 {
                    let cb = &q.params.codebooks[d];
                    let mut best = (f64::INFINITY, 0);
                    for c in 0..8 {
                        let mut dist = 0.0;
                        for k in 0..4 {
                            dist += (r[k] - cb.get(c, k)).powi(2);
                        }
                        if dist < best.0 {
                            best = (dist, c);
                        }
                    }
                    assert_eq!(out.codes[d][i], best.1);
                    for k in 0..4 {
                        r[k] -= cb.get(best.1, k);
                        s[k] += cb.get(best.1, k);
                    }
                }
                for k in 0..4 {
                    assert!((out.s_d.get(i, k) - s[k]).abs() < 1e-12);
                    assert!((out.final_residual().get(i, k) - r[k]).abs() < 1e-12);
                    assert!((x.get(i, k) - out.final_residual().get(i, k) - out.s_d.get(i, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_examples() {
        let mut q = implicit(2, 1, 2, false, 0);
        q.params.codebooks[0] = Matrix::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0]]);
        let out = rq_quantize(&q, &Matrix::row_vector(&[0.0, 0.0]), None).unwrap();
        assert!((rq_loss(&out, 0.25) - 2.5).abs() < 1e-15);
        assert!((out.l_rq - 2.5).abs() < 1e-15);

        let out = rq_quantize(&q, &Matrix::row_vector(&[5.0, 5.0]), None).unwrap();
        assert_eq!(rq_loss(&out, 0.25), 0.0);
    }

    #[test]
    fn loss_equals_scaled_residual_energy() {
        let mut rng = SeededRng::new(7);
        for trial in 0..30 {
            let q = implicit(3, 4, 6, false, trial);
            let x = Matrix::gaussian(7, 3, 0.5, &mut rng);
            let out = rq_quantize(&q, &x, None).unwrap();
            let energy: f64 = out
                .residuals
                .iter()
                .flat_map(|r| r.as_slice().iter())
                .map(|v| v * v)
                .sum();
            let want = 1.25 * energy / 7.0;
            assert!((rq_loss(&out, 0.25) - want).abs() < 1e-12);
            assert!((out.l_rq - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_inputs_give_zero() {
        let q = implicit(3, 2, 4, false, 3);
        let x = Matrix::gaussian(4, 3, 0.5, &mut SeededRng::new(1));
        let out = rq_quantize(&q, &x, None).unwrap();
        let g = rq_backward(&q, &out, &Matrix::zeros(4, 3), 0.0).unwrap();
        assert_eq!(g.grad_xb.max_abs(), 0.0);
        assert!(g.params.blocks().iter().all(|(_, m)| m.max_abs() == 0.0));
    }

    #[test]
    fn backward_single_level_analytic_form() {
        let q = implicit(2, 1, 3, false, 5);
        let x = Matrix::row_vector(&[0.3, -0.4]);
        let out = rq_quantize(&q, &x, None).unwrap();
        let c = out.codes[0][0];
        let e = q.params.codebooks[0].row(c).to_vec();
        let gs = Matrix::row_vector(&[0.5, 2.0]);
        let (alpha, beta) = (0.7, 0.25);
        let g = rq_backward(&q, &out, &gs, alpha).unwrap();
        for k in 0..2 {
            let cb = 2.0 * alpha * (e[k] - x.get(0, k));
            assert!((g.params.codebooks[0].get(c, k) - cb).abs() < 1e-15);
            let gx = gs.get(0, k) + 2.0 * alpha * beta * (x.get(0, k) - e[k]);
            assert!((g.grad_xb.get(0, k) - gx).abs() < 1e-15);
        }
        for other in (0..3).filter(|&r| r != c) {
            assert!(g.params.codebooks[0].row(other).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_zero_code_gets_no_gradient() {
        let q = implicit(2, 2, 4, true, 5);
        let x = Matrix::gaussian(6, 2, 0.01, &mut SeededRng::new(2));
        let out = rq_quantize(&q, &x, None).unwrap();
        let g = rq_backward(&q, &out, &Matrix::filled(6, 2, 1.0), 1.0).unwrap();
        for cb in &g.params.codebooks {
            assert!(cb.row(0).iter().all(|&v| v == 0.0));
        }
    }

    /// Quantizer parameters plus the input, so one gradcheck covers both.
    #[derive(Clone)]
    struct WithInput {
        q: QuantizerParams,
        x: Matrix,
    }

    impl Params for WithInput {
        fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
            self.q.visit(prefix, out);
            out.push(("x_b".into(), &self.x));
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
            self.q.visit_mut(prefix, out);
            out.push(("x_b".into(), &mut self.x));
        }
    }

    fn surrogate_check(mut q: Quantizer, x: Matrix, alpha: f64) {
        let n = x.rows();
        let target = Matrix::gaussian(n, q.code_dim, 1.0, &mut SeededRng::new(99));
        let task = |s: &Matrix| -> (f64, Matrix) {
            let mut g = s.clone();
            let mut l = 0.0;
            for (v, t) in g.as_mut_slice().iter_mut().zip(target.as_slice()) {
                l += 0.5 * (*v - t) * (*v - t) * v.sin().exp();
                *v = (*v - t) * v.sin().exp() + 0.5 * (*v - t) * (*v - t) * v.sin().exp() * v.cos();
            }
            (l, g)
        };
        let base = rq_quantize(&q, &x, None).unwrap();
        let stop = base.stop_gradients();
        let (_, grad_s) = task(&base.s_d);
        let g = rq_backward(&q, &base, &grad_s, alpha).unwrap();
        let analytic = WithInput {
            q: g.params,
            x: g.grad_xb,
        };
        let mut point = WithInput {
            q: q.params.clone(),
            x,
        };
        let loss = |p: &WithInput| {
            q.params = p.q.clone();
            let out = rq_quantize(&q, &p.x, Some(&stop)).unwrap();
            Probe {
                loss: task(&out.s_d).0 + alpha * out.l_rq,
                crossed_boundary: out.codes_flipped,
            }
        };
        let report = gradcheck(loss, &analytic, &mut point, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn implicit_backward_matches_surrogate_finite_differences() {
        let x = Matrix::gaussian(4, 3, 0.5, &mut SeededRng::new(8));
        surrogate_check(implicit(3, 3, 5, false, 4), x.clone(), 1.0);
        surrogate_check(implicit(3, 2, 5, true, 4), x, 0.5);
    }

    #[test]
    fn explicit_backward_matches_surrogate_finite_differences() {
        let x = Matrix::gaussian(4, 5, 0.5, &mut SeededRng::new(9));
        surrogate_check(explicit(&[2, 3], 4, 5, 6), x, 1.0);
    }

    #[test]
    fn explicit_levels_quantize_their_own_slice() {
        let q = explicit(&[2, 1], 3, 4, 1);
        let x = Matrix::gaussian(3, 3, 1.0, &mut SeededRng::new(3));
        let out = rq_quantize(&q, &x, None).unwrap();
        let slice1 = x.columns(2, 3);
        let proj = q.params.projections[1].affine(&slice1).unwrap();
        assert_eq!(out.level_inputs[1], proj);
        let mut sum = out.selected[0].clone();
        sum.add_assign(&out.selected[1]);
        assert_eq!(out.s_d, sum);
        for d in 0..2 {
            let mut r = out.level_inputs[d].clone();
            for (v, e) in r.as_mut_slice().iter_mut().zip(out.selected[d].as_slice()) {
                *v -= e;
            }
            assert_eq!(out.residuals[d], r);
        }
    }

    #[test]
    fn explicit_layout_by_type_and_level() {
        let mut s = schema(&[2, 2, 1]);
        s.features[1].distribution_type = Some("t0".into());
        let layout = explicit_layout(&s, 2).unwrap();
        assert_eq!(layout, vec![vec![0..2, 2..4], vec![4..5]]);
        assert!(explicit_layout(&s, 3).is_err());
        s.features[2].explicit_level = Some(1);
        s.features[0].explicit_level = Some(2);
        let layout = explicit_layout(&s, 2).unwrap();
        assert_eq!(layout, vec![vec![2..4, 4..5], vec![0..2]]);
        assert_eq!(explicit_level_count(&schema(&[1, 1, 1])), 3);
    }

    #[test]
    fn config_validation() {
        let s = schema(&[2]);
        let mut rng = SeededRng::new(0);
        let bad = [
            QuantizerConfig { depth: 0, ..Default::default() },
            QuantizerConfig { codebook_size: 1, ..Default::default() },
            QuantizerConfig { beta: -1.0, ..Default::default() },
            QuantizerConfig { code_dim: Some(3), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(Quantizer::new(cfg, &s, &mut rng), Err(Error::Config(_))));
        }
        let q = implicit(2, 2, 4, false, 0);
        assert!(matches!(rq_quantize(&q, &Matrix::zeros(1, 3), None), Err(Error::Config(_))));
    }

    #[test]
    fn initialization_samples_level_inputs() {
        let mut q = implicit(2, 2, 4, false, 0);
        let x = Matrix::gaussian(16, 2, 1.0, &mut SeededRng::new(5));
        q.initialize_from(&x, &mut SeededRng::new(6)).unwrap();
        for r in 0..4 {
            let row = q.params.codebooks[0].row(r);
            assert!((0..16).any(|i| x.row(i) == row));
        }
        assert!(q.initialized);

        let mut small = implicit(2, 1, 8, true, 0);
        small.initialize_from(&x.columns(0, 2).gather_rows(&[0, 1]), &mut SeededRng::new(1)).unwrap();
        assert!(small.params.codebooks[0].row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn usage_examples() {
        let mut u = CodebookUsage::new(1, 4);
        u.counts[0][0] = 10;
        assert_eq!(u.entropy(0), 0.0);
        assert_eq!(u.dead_codes(0), 3);
        u.counts[0] = vec![5, 5, 5, 5];
        assert!((u.entropy(0) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(u.dead_codes(0), 0);
        assert!(codebook_usage_stats(std::iter::empty(), 4).is_err());
    }

    #[test]
    fn usage_histogram_counts_every_example() {
        let q = implicit(3, 3, 6, false, 2);
        let mut rng = SeededRng::new(3);
        let outs: Vec<_> = (0..5)
            .map(|i| rq_quantize(&q, &Matrix::gaussian(3 + i, 3, 0.4, &mut rng), None).unwrap())
            .collect();
        let usage = codebook_usage_stats(&outs, 6).unwrap();
        let n: u64 = (0..5).map(|i| 3 + i as u64).sum();
        for d in 0..3 {
            assert_eq!(usage.total(d), n);
            assert!(usage.entropy(d) >= 0.0 && usage.entropy(d) <= 6f64.ln() + 1e-12);
        }
    }

    #[test]
    fn dead_code_restart_reseeds_unused_rows() {
        let mut q = implicit(2, 1, 4, false, 0);
        let x = Matrix::gaussian(5, 2, 1.0, &mut SeededRng::new(1));
        let out = rq_quantize(&q, &x, None).unwrap();
        let mut usage = CodebookUsage::new(1, 4);
        usage.record(&out);
        let dead = usage.dead_codes(0);
        let restarted = q.restart_dead_codes(&usage, &out, &mut SeededRng::new(2));
        assert_eq!(restarted, dead);
    }

    fn arb_instance() -> impl Strategy<Value = (u64, usize, usize, usize)> {
        (any::<u64>(), 1usize..5, 1usize..6, 2usize..9)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn reconstruction_and_greedy_optimality((seed, z, depth, k) in arb_instance()) {
            let q = implicit(z, depth, k, false, seed);
            let x = Matrix::gaussian(5, z, 0.5, &mut SeededRng::new(seed ^ 1));
            let out = rq_quantize(&q, &x, None).unwrap();
            for i in 0..5 {
                for c in 0..z {
                    let recon = out.s_d.get(i, c) + out.final_residual().get(i, c);
                    prop_assert!((recon - x.get(i, c)).abs() <= 1e-12);
                }
                for d in 0..depth {
                    let prev = out.level_inputs[d].row(i);
                    let chosen = out.residuals[d].row(i).iter().map(|v| v * v).sum::<f64>();
                    for code in 0..k {
                        let alt = squared_distance(prev, q.params.codebooks[d].row(code));
                        prop_assert!(chosen <= alt + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn zero_code_makes_residual_norms_monotone((seed, z, depth, k) in arb_instance()) {
            let q = implicit(z, depth, k, true, seed);
            let x = Matrix::gaussian(5, z, 0.5, &mut SeededRng::new(seed ^ 2));
            let out = rq_quantize(&q, &x, None).unwrap();
            for i in 0..5 {
                let mut prev: f64 = x.row(i).iter().map(|v| v * v).sum();
                for d in 0..depth {
                    let cur: f64 = out.residuals[d].row(i).iter().map(|v| v * v).sum();
                    prop_assert!(cur <= prev);
                    prev = cur;
                }
            }
        }

        #[test]
        fn vq_is_translation_invariant(seed in any::<u64>(), z in 1usize..5, k in 2usize..9, shift in -3.0f64..3.0) {
            let mut rng = SeededRng::new(seed);
            let cb = Matrix::gaussian(k, z, 1.0, &mut rng);
            let s: Vec<f64> = (0..z).map(|_| rng.normal(0.0, 1.0)).collect();
            let t: Vec<f64> = (0..z).map(|i| shift * (i as f64 + 1.0)).collect();
            let moved_s: Vec<f64> = s.iter().zip(&t).map(|(a, b)| a + b).collect();
            let mut moved_cb = cb.clone();
            for r in 0..k {
                for (v, b) in moved_cb.row_mut(r).iter_mut().zip(&t) {
                    *v += b;
                }
            }
            let a = vq_nearest(&s, &cb).unwrap();
            let b = vq_nearest(&moved_s, &moved_cb).unwrap();
            // shifting can only change the winner on an exact float tie
            if a != b {
                let da = squared_distance(&s, cb.row(a));
                let db = squared_distance(&s, cb.row(b));
                prop_assert!((da - db).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_is_permutation_invariant((seed, z, depth, k) in arb_instance()) {
            let q = implicit(z, depth, k, false, seed);
            let mut rng = SeededRng::new(seed ^ 3);
            let x = Matrix::gaussian(6, z, 0.5, &mut rng);
            let mut order: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut order);
            let a = rq_quantize(&q, &x, None).unwrap();
            let b = rq_quantize(&q, &x.gather_rows(&order), None).unwrap();
            prop_assert!((rq_loss(&a, 0.25) - rq_loss(&b, 0.25)).abs() < 1e-12);
        }

        #[test]
        fn alpha_zero_is_pure_straight_through((seed, z, depth, k) in arb_instance()) {
            let q = implicit(z, depth, k, false, seed);
            let mut rng = SeededRng::new(seed ^ 4);
            let x = Matrix::gaussian(4, z, 0.5, &mut rng);
            let out = rq_quantize(&q, &x, None).unwrap();
            let gs = Matrix::gaussian(4, z, 1.0, &mut rng);
            let g = rq_backward(&q, &out, &gs, 0.0).unwrap();
            prop_assert_eq!(g.grad_xb, gs);
        }
    }
}
