//! Synthetic mixed multi-distribution data and CSV ingestion.
//!
//! The generator plants a coarse-to-fine logit structure over the partition
//! lattice: per-type main effects, pairwise type interactions, per-feature
//! effects, and per-feature effects that change with the coarsest
//! distribution type (each population/scenario has its own preferences).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{ExampleBatch, FeatureSchema, FeatureSpec};
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softmax};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionType {
    pub name: String,
    pub cardinality: usize,
}

impl DistributionType {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Coarsest first.
    pub distribution_types: Vec<DistributionType>,
    pub nondist_cardinalities: Vec<usize>,
    pub n_examples: usize,
    /// Share of examples held out as the test split (taken from the end).
    pub test_fraction: f64,
    pub base_logit: f64,
    /// Standard deviation of each type's main effects.
    pub level_effect_scales: Vec<f64>,
    /// Standard deviation of pairwise type interactions.
    pub interaction_scale: f64,
    /// Standard deviation of partition-independent feature effects.
    pub feature_effect_scale: f64,
    /// Number of latent feature-effect tables mixed per partition cell.
    pub latent_factors: usize,
    /// Standard deviation of the latent feature-effect tables.
    pub conditional_effect_scale: f64,
    /// Each cell mixes the latent tables with `softmax(logits)`; the coarsest
    /// type contributes logits with this standard deviation.
    pub mixing_sharpness: f64,
    /// Standard deviation of the finer types' additions to those logits.
    pub mixing_refinement: f64,
    /// Gaussian noise on the logit.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            distribution_types: vec![
                DistributionType::new("domain_id", 3),
                DistributionType::new("is_new_user", 2),
                DistributionType::new("ad_source", 2),
            ],
            nondist_cardinalities: vec![50; 5],
            n_examples: 60_000,
            test_fraction: 1.0 / 6.0,
            base_logit: -0.5,
            level_effect_scales: vec![1.5, 1.0, 1.0],
            interaction_scale: 0.5,
            feature_effect_scale: 0.5,
            latent_factors: 3,
            conditional_effect_scale: 0.0,
            mixing_sharpness: 3.0,
            mixing_refinement: 1.0,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

pub const LABEL_COLUMN: &str = "click";

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distribution_types.len() < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 distribution types".into(),
            ));
        }
        if let Some(t) = self.distribution_types.iter().find(|t| t.cardinality < 2) {
            return Err(Error::Config(format!("distribution type `{}` needs cardinality >= 2", t.name)));
        }
        if self.nondist_cardinalities.iter().any(|&c| c < 2) {
            return Err(Error::Config("non-distribution cardinalities must be >= 2".into()));
        }
        if self.level_effect_scales.len() != self.distribution_types.len() {
            return Err(Error::Config(format!(
                "{} level_effect_scales for {} distribution types",
                self.level_effect_scales.len(),
                self.distribution_types.len()
            )));
        }
        let scales = self.level_effect_scales.iter().chain([
            &self.interaction_scale,
            &self.feature_effect_scale,
            &self.conditional_effect_scale,
            &self.mixing_sharpness,
            &self.mixing_refinement,
            &self.label_noise,
        ]);
        for &s in scales {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("effect scales must be finite and >= 0, got {s}")));
            }
        }
        if !self.base_logit.is_finite() {
            return Err(Error::Config("base_logit must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be >= 1".into()));
        }
        let names: Vec<&str> = self.distribution_types.iter().map(|t| t.name.as_str()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) || *n == LABEL_COLUMN || nondist_name_taken(n, self.nondist_cardinalities.len()) {
                return Err(Error::Config(format!("distribution type name `{n}` is not unique")));
            }
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        (self.n_examples as f64 * self.test_fraction).round() as usize
    }

    /// Schema describing generated data: distribution features first, then
    /// `f0..`, label `click`.
    pub fn schema(&self) -> FeatureSchema {
        let mut features: Vec<FeatureSpec> = self
            .distribution_types
            .iter()
            .map(|t| FeatureSpec::new(t.name.clone(), t.cardinality).distribution(t.name.clone()))
            .collect();
        features.extend(
            self.nondist_cardinalities
                .iter()
                .enumerate()
                .map(|(i, &c)| FeatureSpec::new(nondist_name(i), c)),
        );
        FeatureSchema {
            features,
            label_column: LABEL_COLUMN.into(),
        }
    }
}

fn nondist_name(i: usize) -> String {
    format!("f{i}")
}

fn nondist_name_taken(name: &str, count: usize) -> bool {
    (0..count).any(|i| nondist_name(i) == name)
}

/// The generating parameters behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEffects {
    pub base_logit: f64,
    /// `main[type][member]`.
    pub main: Vec<Vec<f64>>,
    /// `(type_a, type_b, table[m_a][m_b])` for every pair `a < b`.
    pub interactions: Vec<(usize, usize, Vec<Vec<f64>>)>,
    /// `feature[f][value]`.
    pub feature: Vec<Vec<f64>>,
    /// `latent[k][f][value]`.
    pub latent: Vec<Vec<Vec<f64>>>,
    /// `mixing[cell][k]` on the simplex, cells in row-major member order.
    pub mixing: Vec<Vec<f64>>,
}

impl PlantedEffects {
    fn draw(config: &SyntheticConfig, rng: &mut SeededRng) -> Self {
        let types = &config.distribution_types;
        let main = types
            .iter()
            .zip(&config.level_effect_scales)
            .map(|(t, &s)| (0..t.cardinality).map(|_| rng.normal(0.0, s)).collect())
            .collect();
        let mut interactions = Vec::new();
        for a in 0..types.len() {
            for b in a + 1..types.len() {
                let table = (0..types[a].cardinality)
                    .map(|_| {
                        (0..types[b].cardinality)
                            .map(|_| rng.normal(0.0, config.interaction_scale))
                            .collect()
                    })
                    .collect();
                interactions.push((a, b, table));
            }
        }
        let feature_table = |rng: &mut SeededRng, scale: f64| -> Vec<Vec<f64>> {
            config
                .nondist_cardinalities
                .iter()
                .map(|&c| (0..c).map(|_| rng.normal(0.0, scale)).collect())
                .collect()
        };
        let feature = feature_table(rng, config.feature_effect_scale);
        let latent = (0..config.latent_factors)
            .map(|_| feature_table(rng, config.conditional_effect_scale))
            .collect();
        // coarse member part plus (coarse, finer member) refinements
        let k = config.latent_factors;
        let coarse: Vec<Vec<f64>> = (0..types[0].cardinality)
            .map(|_| (0..k).map(|_| rng.normal(0.0, config.mixing_sharpness)).collect())
            .collect();
        let refine: Vec<Vec<Vec<Vec<f64>>>> = types[1..]
            .iter()
            .map(|t| {
                (0..types[0].cardinality)
                    .map(|_| {
                        (0..t.cardinality)
                            .map(|_| (0..k).map(|_| rng.normal(0.0, config.mixing_refinement)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let cells: usize = types.iter().map(|t| t.cardinality).product();
        let mixing = (0..cells)
            .map(|cell| {
                let members = cell_members(types, cell);
                let mut w = coarse[members[0]].clone();
                for (t, table) in refine.iter().enumerate() {
                    for (wk, r) in w.iter_mut().zip(&table[members[0]][members[t + 1]]) {
                        *wk += r;
                    }
                }
                softmax(&w)
            })
            .collect();
        Self {
            base_logit: config.base_logit,
            main,
            interactions,
            feature,
            latent,
            mixing,
        }
    }

    /// Noise-free logit for one example given raw member / value indices.
    pub fn logit(&self, members: &[usize], values: &[usize]) -> f64 {
        let mut z = self.base_logit;
        for (t, &m) in members.iter().enumerate() {
            z += self.main[t][m];
        }
        for (a, b, table) in &self.interactions {
            z += table[members[*a]][members[*b]];
        }
        for (f, &v) in values.iter().enumerate() {
            z += self.feature[f][v];
        }
        let types: Vec<usize> = self.main.iter().map(Vec::len).collect();
        let w = &self.mixing[cell_index(&types, members)];
        for (wk, table) in w.iter().zip(&self.latent) {
            let h: f64 = values.iter().enumerate().map(|(f, &v)| table[f][v]).sum();
            z += wk * h;
        }
        z
    }
}

fn cell_members(types: &[DistributionType], mut cell: usize) -> Vec<usize> {
    let mut members = vec![0; types.len()];
    for (t, m) in types.iter().zip(members.iter_mut()).rev() {
        *m = cell % t.cardinality;
        cell /= t.cardinality;
    }
    members
}

/// Row-major index of a member tuple.
pub fn cell_index(cardinalities: &[usize], members: &[usize]) -> usize {
    cardinalities.iter().zip(members).fold(0, |acc, (&c, &m)| acc * c + m)
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: FeatureSchema,
    pub train: ExampleBatch,
    pub test: ExampleBatch,
    pub effects: PlantedEffects,
}

/// Draws a dataset; ids are `member + 1` (id 0 stays reserved for OOV).
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut param_rng = SeededRng::derive(config.seed, 1);
    let mut sample_rng = SeededRng::derive(config.seed, 2);
    let effects = PlantedEffects::draw(config, &mut param_rng);

    let schema = config.schema();
    let n = config.n_examples;
    let n_types = config.distribution_types.len();
    let mut ids = vec![Vec::with_capacity(n); schema.features.len()];
    let mut labels = Vec::with_capacity(n);
    let mut members = vec![0; n_types];
    let mut values = vec![0; config.nondist_cardinalities.len()];
    for _ in 0..n {
        for (t, m) in members.iter_mut().enumerate() {
            *m = sample_rng.below(config.distribution_types[t].cardinality);
            ids[t].push(*m as u32 + 1);
        }
        for (f, v) in values.iter_mut().enumerate() {
            *v = sample_rng.below(config.nondist_cardinalities[f]);
            ids[n_types + f].push(*v as u32 + 1);
        }
        let noise = if config.label_noise > 0.0 {
            sample_rng.normal(0.0, config.label_noise)
        } else {
            0.0
        };
        let p = sigmoid(effects.logit(&members, &values) + noise);
        labels.push(if sample_rng.bernoulli(p) { 1.0 } else { 0.0 });
    }
    let all = ExampleBatch { ids, labels };
    let n_train = n - config.n_test();
    Ok(SyntheticData {
        schema,
        train: all.slice(0..n_train),
        test: all.slice(n_train..n),
        effects,
    })
}

/// Value <-> id mapping for one feature; ids start at 1 in first-seen order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dictionary {
    pub values: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Dictionary {
    pub fn from_values(values: Vec<String>) -> Self {
        let index = values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32 + 1))
            .collect();
        Self { values, index }
    }

    pub fn encode(&self, value: &str) -> u32 {
        self.index.get(value).copied().unwrap_or(0)
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        (id as usize).checked_sub(1).and_then(|i| self.values.get(i)).map(String::as_str)
    }

    fn fit(&mut self, value: &str, capacity: usize) -> u32 {
        if let Some(&id) = self.index.get(value) {
            return id;
        }
        if self.values.len() >= capacity {
            return 0;
        }
        self.values.push(value.to_string());
        let id = self.values.len() as u32;
        self.index.insert(value.to_string(), id);
        id
    }

    fn rebuild_index(&mut self) {
        *self = Self::from_values(std::mem::take(&mut self.values));
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dictionaries {
    pub features: Vec<Dictionary>,
}

impl Dictionaries {
    /// Maps the raw values `0..cardinality` of every feature to `value + 1`,
    /// matching the ids of generated data.
    pub fn identity(schema: &FeatureSchema) -> Self {
        Self {
            features: schema
                .features
                .iter()
                .map(|f| Dictionary::from_values((0..f.cardinality).map(|v| v.to_string()).collect()))
                .collect(),
        }
    }

    /// Restores lookup indices after deserialization.
    pub fn rebuild(&mut self) {
        for d in &mut self.features {
            d.rebuild_index();
        }
    }
}

/// Reads a comma-separated file with a header row. With `dictionaries` the
/// encoding is applied as-is (unseen values become id 0); without, it is
/// fitted on this file, capped at each feature's cardinality.
pub fn load_csv_from<R: Read>(
    schema: &FeatureSchema,
    reader: R,
    dictionaries: Option<&Dictionaries>,
) -> Result<(ExampleBatch, Dictionaries)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data("empty file".into()));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    };
    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<_>>()?;
    let label_col = column(&schema.label_column)?;

    let mut dicts = match dictionaries {
        Some(d) => {
            if d.features.len() != schema.features.len() {
                return Err(Error::shape("dictionaries", schema.features.len(), d.features.len()));
            }
            d.clone()
        }
        None => Dictionaries {
            features: vec![Dictionary::default(); schema.features.len()],
        },
    };
    let fitting = dictionaries.is_none();

    let mut batch = ExampleBatch {
        ids: vec![Vec::new(); schema.features.len()],
        labels: Vec::new(),
    };
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        for (f, &col) in feature_cols.iter().enumerate() {
            let value = record.get(col).ok_or_else(|| Error::Ingest {
                feature: schema.features[f].name.clone(),
                row: line,
                message: "missing field".into(),
            })?;
            let id = if fitting {
                dicts.features[f].fit(value, schema.features[f].cardinality)
            } else {
                dicts.features[f].encode(value)
            };
            batch.ids[f].push(id);
        }
        let raw = record.get(label_col).unwrap_or("");
        let label = match raw {
            "0" => 0.0,
            "1" => 1.0,
            other => {
                return Err(Error::Ingest {
                    feature: schema.label_column.clone(),
                    row: line,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        batch.labels.push(label);
    }
    if batch.is_empty() {
        return Err(Error::Data("file has no data rows".into()));
    }
    Ok((batch, dicts))
}

pub fn load_csv(
    schema: &FeatureSchema,
    path: &Path,
    dictionaries: Option<&Dictionaries>,
) -> Result<(ExampleBatch, Dictionaries)> {
    let file = std::fs::File::open(path)?;
    load_csv_from(schema, file, dictionaries).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a batch whose ids are `value + 1` as CSV with raw values.
pub fn write_csv<W: Write>(schema: &FeatureSchema, batch: &ExampleBatch, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().quote_style(csv::QuoteStyle::Never).from_writer(writer);
    let mut header: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&schema.label_column);
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for row in 0..batch.len() {
        record.clear();
        for col in &batch.ids {
            record.push(col[row].saturating_sub(1).to_string());
        }
        record.push(if batch.labels[row] == 1.0 { "1".into() } else { "0".into() });
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Example counts per cell of the distribution-feature cross product.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub keys: Vec<String>,
    pub cells: BTreeMap<Vec<u32>, usize>,
}

impl PartitionReport {
    pub fn total(&self) -> usize {
        self.cells.values().sum()
    }
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}\tcount", self.keys.join("\t"))?;
        for (cell, count) in &self.cells {
            let ids: Vec<String> = cell.iter().map(u32::to_string).collect();
            writeln!(f, "{}\t{count}", ids.join("\t"))?;
        }
        write!(f, "cells={} examples={}", self.cells.len(), self.total())
    }
}

pub fn partition_report(batch: &ExampleBatch, schema: &FeatureSchema) -> PartitionReport {
    let dist: Vec<usize> = schema.distribution_features().map(|(i, _)| i).collect();
    let mut cells = BTreeMap::new();
    for row in 0..batch.len() {
        let key: Vec<u32> = dist.iter().map(|&f| batch.ids[f][row]).collect();
        *cells.entry(key).or_insert(0) += 1;
    }
    PartitionReport {
        keys: dist.iter().map(|&f| schema.features[f].name.clone()).collect(),
        cells,
    }
}
