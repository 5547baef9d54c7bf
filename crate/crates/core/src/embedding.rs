//! Categorical embeddings and the two model inputs: the full representation
//! `x` (all features) and the distribution representation `x_b` (distribution
//! features only).

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::params::join;
use crate::numeric::{Matrix, Params};
use crate::rng::SeededRng;

pub const DEFAULT_EMBEDDING_DIM: usize = 8;
const EMBEDDING_INIT_STD: f64 = 0.01;

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    /// Number of known values; ids run `1..=cardinality`, id 0 is OOV.
    pub cardinality: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default, rename = "is_distribution_feature")]
    pub distribution: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution_type: Option<String>,
    /// 1-based codebook level for explicit extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_level: Option<usize>,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            distribution: false,
            distribution_type: None,
            explicit_level: None,
        }
    }

    pub fn distribution(mut self, kind: impl Into<String>) -> Self {
        self.distribution = true;
        self.distribution_type = Some(kind.into());
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn at_level(mut self, level: usize) -> Self {
        self.explicit_level = Some(level);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub label_column: String,
}

impl FeatureSchema {
    /// Checks schema invariants. `depth` enables the explicit-level range check.
    pub fn validate(&self, depth: Option<usize>) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate feature name `{}`", f.name)));
            }
            if f.name == self.label_column {
                return Err(Error::Config(format!(
                    "feature `{}` collides with the label column",
                    f.name
                )));
            }
            if f.cardinality < 1 {
                return Err(Error::Config(format!("feature `{}` has cardinality 0", f.name)));
            }
            if f.embedding_dim < 1 {
                return Err(Error::Config(format!("feature `{}` has embedding_dim 0", f.name)));
            }
            if let (Some(level), Some(d)) = (f.explicit_level, depth) {
                if level < 1 || level > d {
                    return Err(Error::Config(format!(
                        "feature `{}` explicit_level {level} outside 1..={d}",
                        f.name
                    )));
                }
            }
        }
        if !self.features.iter().any(|f| f.distribution) {
            return Err(Error::Config("schema declares no distribution feature".into()));
        }
        Ok(())
    }

    pub fn x_dim(&self) -> usize {
        self.features.iter().map(|f| f.embedding_dim).sum()
    }

    pub fn xb_dim(&self) -> usize {
        self.features
            .iter()
            .filter(|f| f.distribution)
            .map(|f| f.embedding_dim)
            .sum()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn distribution_features(&self) -> impl Iterator<Item = (usize, &FeatureSpec)> {
        self.features.iter().enumerate().filter(|(_, f)| f.distribution)
    }

    /// Column layout of `x` and `x_b`, independent of any batch.
    pub fn slice_map(&self) -> SliceMap {
        let mut entries = Vec::with_capacity(self.features.len());
        let (mut xo, mut bo) = (0, 0);
        for (i, f) in self.features.iter().enumerate() {
            let x_cols = xo..xo + f.embedding_dim;
            xo += f.embedding_dim;
            let xb_cols = f.distribution.then(|| {
                let r = bo..bo + f.embedding_dim;
                bo += f.embedding_dim;
                r
            });
            entries.push(FeatureSlice {
                feature: i,
                x_cols,
                xb_cols,
            });
        }
        SliceMap {
            entries,
            x_dim: xo,
            xb_dim: bo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSlice {
    pub feature: usize,
    pub x_cols: Range<usize>,
    pub xb_cols: Option<Range<usize>>,
}

/// Which columns of `x` / `x_b` belong to which feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceMap {
    pub entries: Vec<FeatureSlice>,
    pub x_dim: usize,
    pub xb_dim: usize,
}

/// Dictionary-encoded categorical columns plus binary labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExampleBatch {
    /// `ids[feature][row]`.
    pub ids: Vec<Vec<u32>>,
    pub labels: Vec<f64>,
}

impl ExampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.ids.len() != schema.features.len() {
            return Err(Error::shape(
                "batch feature columns",
                schema.features.len(),
                self.ids.len(),
            ));
        }
        for (f, col) in schema.features.iter().zip(&self.ids) {
            if col.len() != self.labels.len() {
                return Err(Error::shape(
                    format!("batch column `{}`", f.name),
                    self.labels.len(),
                    col.len(),
                ));
            }
            if let Some(row) = col.iter().position(|&id| id as usize > f.cardinality) {
                return Err(Error::Ingest {
                    feature: f.name.clone(),
                    row,
                    message: format!("id {} exceeds cardinality {}", col[row], f.cardinality),
                });
            }
        }
        if let Some(row) = self.labels.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Ingest {
                feature: schema.label_column.clone(),
                row,
                message: format!("label {} is not binary", self.labels[row]),
            });
        }
        Ok(())
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ExampleBatch {
        ExampleBatch {
            ids: self
                .ids
                .iter()
                .map(|col| indices.iter().map(|&i| col[i]).collect())
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn slice(&self, range: Range<usize>) -> ExampleBatch {
        ExampleBatch {
            ids: self.ids.iter().map(|col| col[range.clone()].to_vec()).collect(),
            labels: self.labels[range].to_vec(),
        }
    }
}

/// One table per feature, `(cardinality + 1) x embedding_dim`; row 0 is OOV.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub tables: Vec<Matrix>,
}

impl EmbeddingTables {
    pub fn new(schema: &FeatureSchema, rng: &mut SeededRng) -> Self {
        let tables = schema
            .features
            .iter()
            .map(|f| Matrix::gaussian(f.cardinality + 1, f.embedding_dim, EMBEDDING_INIT_STD, rng))
            .collect();
        Self { tables }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tables: self.tables.iter().map(Matrix::zeros_like).collect(),
        }
    }

    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if self.tables.len() != schema.features.len() {
            return Err(Error::shape("embedding tables", schema.features.len(), self.tables.len()));
        }
        for (t, f) in self.tables.iter().zip(&schema.features) {
            if t.shape() != (f.cardinality + 1, f.embedding_dim) {
                return Err(Error::shape(
                    format!("embedding table `{}`", f.name),
                    format!("{:?}", (f.cardinality + 1, f.embedding_dim)),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

impl Params for EmbeddingTables {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.tables.visit(&join(prefix, "table"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.tables.visit_mut(&join(prefix, "table"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Embedded {
    pub x: Matrix,
    pub x_b: Matrix,
    pub slice_map: SliceMap,
}

pub fn embed_batch(
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    batch: &ExampleBatch,
) -> Result<Embedded> {
    batch.validate(schema)?;
    tables.check_schema(schema)?;
    let slice_map = schema.slice_map();
    let n = batch.len();
    let mut x = Matrix::zeros(n, slice_map.x_dim);
    let mut x_b = Matrix::zeros(n, slice_map.xb_dim);
    for entry in &slice_map.entries {
        let table = &tables.tables[entry.feature];
        for (row, &id) in batch.ids[entry.feature].iter().enumerate() {
            let values = table.row(id as usize);
            x.row_mut(row)[entry.x_cols.clone()].copy_from_slice(values);
            if let Some(cols) = &entry.xb_cols {
                x_b.row_mut(row)[cols.clone()].copy_from_slice(values);
            }
        }
    }
    Ok(Embedded { x, x_b, slice_map })
}

/// Accumulated gradients for the rows of one table touched by a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRowGrads {
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRowGrads {
    fn add(&mut self, row: usize, grad: &[f64]) {
        let entry = self.rows.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
        for (e, g) in entry.iter_mut().zip(grad) {
            *e += g;
        }
    }

    pub fn to_dense(&self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for (&r, g) in &self.rows {
            m.row_mut(r).copy_from_slice(g);
        }
        m
    }
}

/// Scatters `grad_x` and `grad_xb` back onto the looked-up rows. Distribution
/// features receive the sum of both paths.
pub fn embedding_gradients(
    schema: &FeatureSchema,
    batch: &ExampleBatch,
    grad_x: &Matrix,
    grad_xb: &Matrix,
    slice_map: &SliceMap,
) -> Result<Vec<SparseRowGrads>> {
    let n = batch.len();
    if grad_x.shape() != (n, slice_map.x_dim) {
        return Err(Error::shape(
            "embedding_gradients grad_x",
            format!("{:?}", (n, slice_map.x_dim)),
            format!("{:?}", grad_x.shape()),
        ));
    }
    if grad_xb.shape() != (n, slice_map.xb_dim) {
        return Err(Error::shape(
            "embedding_gradients grad_xb",
            format!("{:?}", (n, slice_map.xb_dim)),
            format!("{:?}", grad_xb.shape()),
        ));
    }
    let mut out = vec![SparseRowGrads::default(); schema.features.len()];
    for entry in &slice_map.entries {
        let acc = &mut out[entry.feature];
        for (row, &id) in batch.ids[entry.feature].iter().enumerate() {
            acc.add(id as usize, &grad_x.row(row)[entry.x_cols.clone()]);
            if let Some(cols) = &entry.xb_cols {
                acc.add(id as usize, &grad_xb.row(row)[cols.clone()]);
            }
        }
    }
    Ok(out)
}

/// Dense per-table gradients, shaped like `tables`.
pub fn dense_embedding_gradients(tables: &EmbeddingTables, sparse: &[SparseRowGrads]) -> EmbeddingTables {
    EmbeddingTables {
        tables: tables
            .tables
            .iter()
            .zip(sparse)
            .map(|(t, s)| s.to_dense(t.rows(), t.cols()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema_2_3() -> FeatureSchema {
        FeatureSchema {
            features: vec![
                FeatureSpec::new("scenario", 4).with_dim(2).distribution("scenario"),
                FeatureSpec::new("item", 5).with_dim(3),
            ],
            label_column: "click".into(),
        }
    }

    #[test]
    fn lookup_returns_table_row() {
        let schema = FeatureSchema {
            features: vec![FeatureSpec::new("a", 4).with_dim(2).distribution("t")],
            label_column: "y".into(),
        };
        let mut tables = EmbeddingTables::new(&schema, &mut SeededRng::new(0));
        tables.tables[0].row_mut(3).copy_from_slice(&[0.1, 0.2]);
        let batch = ExampleBatch {
            ids: vec![vec![3]],
            labels: vec![1.0],
        };
        let e = embed_batch(&schema, &tables, &batch).unwrap();
        assert_eq!(e.x.row(0), &[0.1, 0.2]);
        assert_eq!(e.x_b.row(0), &[0.1, 0.2]);
    }

    #[test]
    fn concatenation_follows_schema_order() {
        let schema = schema_2_3();
        let tables = EmbeddingTables::new(&schema, &mut SeededRng::new(1));
        let batch = ExampleBatch {
            ids: vec![vec![1, 2], vec![4, 0]],
            labels: vec![0.0, 1.0],
        };
        let e = embed_batch(&schema, &tables, &batch).unwrap();
        assert_eq!(e.x.shape(), (2, 5));
        assert_eq!(e.x_b.shape(), (2, 2));
        assert_eq!(&e.x.row(1)[..2], tables.tables[0].row(2));
        assert_eq!(&e.x.row(1)[2..], tables.tables[1].row(0));
        assert_eq!(e.slice_map.entries[1].x_cols, 2..5);
        assert_eq!(e.slice_map.entries[1].xb_cols, None);
    }

    #[test]
    fn out_of_range_id_names_feature_and_row() {
        let schema = schema_2_3();
        let tables = EmbeddingTables::new(&schema, &mut SeededRng::new(1));
        let batch = ExampleBatch {
            ids: vec![vec![1, 2], vec![4, 6]],
            labels: vec![0.0, 1.0],
        };
        match embed_batch(&schema, &tables, &batch) {
            Err(Error::Ingest { feature, row, .. }) => {
                assert_eq!(feature, "item");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_validation() {
        let mut s = schema_2_3();
        assert!(s.validate(Some(1)).is_ok());
        s.features[1].distribution = false;
        s.features[0].distribution = false;
        assert!(s.validate(None).is_err());
        let mut s = schema_2_3();
        s.features[0].explicit_level = Some(3);
        assert!(s.validate(Some(2)).is_err());
        let mut s = schema_2_3();
        s.features[1].name = "scenario".into();
        assert!(s.validate(None).is_err());
    }

    #[test]
    fn zero_gradients_give_zero_rows() {
        let schema = schema_2_3();
        let batch = ExampleBatch {
            ids: vec![vec![1, 1], vec![2, 3]],
            labels: vec![0.0, 1.0],
        };
        let map = schema.slice_map();
        let g = embedding_gradients(&schema, &batch, &Matrix::zeros(2, 5), &Matrix::zeros(2, 2), &map).unwrap();
        assert!(g.iter().flat_map(|s| s.rows.values()).flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_example_row_gradient_is_its_slice() {
        let schema = FeatureSchema {
            features: vec![FeatureSpec::new("a", 3).with_dim(2)],
            label_column: "y".into(),
        };
        let schema = FeatureSchema {
            features: vec![schema.features[0].clone(), FeatureSpec::new("b", 2).with_dim(1).distribution("t")],
            ..schema
        };
        let batch = ExampleBatch {
            ids: vec![vec![2], vec![1]],
            labels: vec![1.0],
        };
        let gx = Matrix::row_vector(&[0.5, -0.25, 2.0]);
        let gxb = Matrix::row_vector(&[1.0]);
        let g = embedding_gradients(&schema, &batch, &gx, &gxb, &schema.slice_map()).unwrap();
        assert_eq!(g[0].rows[&2], vec![0.5, -0.25]);
        // x path plus x_b path
        assert_eq!(g[1].rows[&1], vec![3.0]);
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let schema = schema_2_3();
        let batch = ExampleBatch {
            ids: vec![vec![1], vec![2]],
            labels: vec![0.0],
        };
        let map = schema.slice_map();
        assert!(embedding_gradients(&schema, &batch, &Matrix::zeros(1, 4), &Matrix::zeros(1, 2), &map).is_err());
    }

    fn arb_schema() -> impl Strategy<Value = FeatureSchema> {
        prop::collection::vec((1usize..6, 1usize..4, any::<bool>()), 1..5).prop_map(|specs| {
            let mut features: Vec<FeatureSpec> = specs
                .into_iter()
                .enumerate()
                .map(|(i, (card, dim, dist))| {
                    let f = FeatureSpec::new(format!("f{i}"), card).with_dim(dim);
                    if dist {
                        f.distribution(format!("t{i}"))
                    } else {
                        f
                    }
                })
                .collect();
            features[0].distribution = true;
            FeatureSchema {
                features,
                label_column: "y".into(),
            }
        })
    }

    fn arb_case() -> impl Strategy<Value = (FeatureSchema, ExampleBatch, u64)> {
        (arb_schema(), 1usize..7, any::<u64>()).prop_flat_map(|(schema, n, seed)| {
            let cols: Vec<_> = schema
                .features
                .iter()
                .map(|f| prop::collection::vec(0..=f.cardinality as u32, n))
                .collect();
            (Just(schema), cols, prop::collection::vec(prop::bool::ANY, n), Just(seed)).prop_map(
                |(schema, ids, labels, seed)| {
                    let labels = labels.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
                    (schema, ExampleBatch { ids, labels }, seed)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn embed_matches_per_feature_lookup((schema, batch, seed) in arb_case()) {
            let tables = EmbeddingTables::new(&schema, &mut SeededRng::new(seed));
            let e = embed_batch(&schema, &tables, &batch).unwrap();
            prop_assert_eq!(e.x_b.cols(), schema.xb_dim());
            for row in 0..batch.len() {
                let mut want_x = Vec::new();
                let mut want_xb = Vec::new();
                for (f, spec) in schema.features.iter().enumerate() {
                    let r = tables.tables[f].row(batch.ids[f][row] as usize);
                    want_x.extend_from_slice(r);
                    if spec.distribution {
                        want_xb.extend_from_slice(r);
                    }
                    prop_assert_eq!(&e.x.row(row)[e.slice_map.entries[f].x_cols.clone()], r);
                }
                prop_assert_eq!(e.x.row(row), &want_x[..]);
                prop_assert_eq!(e.x_b.row(row), &want_xb[..]);
            }
        }

        #[test]
        fn unreferenced_rows_do_not_affect_output((schema, batch, seed) in arb_case()) {
            let tables = EmbeddingTables::new(&schema, &mut SeededRng::new(seed));
            let before = embed_batch(&schema, &tables, &batch).unwrap();
            let mut changed = tables.clone();
            for (f, t) in changed.tables.iter_mut().enumerate() {
                for r in 0..t.rows() {
                    if !batch.ids[f].contains(&(r as u32)) {
                        t.row_mut(r).fill(123.0);
                    }
                }
            }
            let after = embed_batch(&schema, &changed, &batch).unwrap();
            prop_assert_eq!(before.x, after.x);
            prop_assert_eq!(before.x_b, after.x_b);
        }

        #[test]
        fn duplicate_ids_accumulate_per_example((schema, batch, seed) in arb_case()) {
            let mut rng = SeededRng::new(seed);
            let map = schema.slice_map();
            let gx = Matrix::gaussian(batch.len(), map.x_dim, 1.0, &mut rng);
            let gxb = Matrix::gaussian(batch.len(), map.xb_dim, 1.0, &mut rng);
            let got = embedding_gradients(&schema, &batch, &gx, &gxb, &map).unwrap();
            for (f, spec) in schema.features.iter().enumerate() {
                let mut want = Matrix::zeros(spec.cardinality + 1, spec.embedding_dim);
                for row in 0..batch.len() {
                    let id = batch.ids[f][row] as usize;
                    let e = &map.entries[f];
                    for (k, c) in e.x_cols.clone().enumerate() {
                        let v = want.get(id, k) + gx.get(row, c);
                        want.set(id, k, v);
                    }
                    if let Some(cols) = &e.xb_cols {
                        for (k, c) in cols.clone().enumerate() {
                            let v = want.get(id, k) + gxb.get(row, c);
                            want.set(id, k, v);
                        }
                    }
                }
                let dense = got[f].to_dense(spec.cardinality + 1, spec.embedding_dim);
                for (a, b) in dense.as_slice().iter().zip(want.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
