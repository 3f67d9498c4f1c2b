//! Attribute embeddings and the compound item vector.
//!
//! Every function here sees attribute values only, never an item id: two
//! items with the same metadata always get the same vector.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{AttrValue, AttributeRecord};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tokenizer::{BpeModel, MISSING_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Textual,
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Per-attribute configuration. `vocab_size` and `embedding_dim` fall back to
/// defaults when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: AttributeKind,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub pooling: Pooling,
}

fn default_kind() -> AttributeKind {
    AttributeKind::Textual
}

impl AttributeSpec {
    pub fn textual(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: AttributeKind::Textual,
            vocab_size: None,
            embedding_dim: None,
            pooling: Pooling::Mean,
        }
    }

    pub fn with_kind(mut self, kind: AttributeKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = Some(dim);
        self
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab_size = Some(vocab);
        self
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub attributes: Vec<AttributeSpec>,
    #[serde(default)]
    pub standardize_numerical: bool,
}

impl FeatureSchema {
    pub fn get(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

/// Embedding width for an attribute vocabulary: `clamp(round(alpha · v^¼), dmin, dmax)`.
pub fn default_dim(vocab_size: usize, alpha: f64, dmin: usize, dmax: usize) -> usize {
    let raw = (alpha * (vocab_size.max(1) as f64).powf(0.25)).round() as usize;
    raw.clamp(dmin, dmax)
}

pub const DEFAULT_DIM_ALPHA: f64 = 6.0;
pub const DEFAULT_DIM_MIN: usize = 8;
pub const DEFAULT_DIM_MAX: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population mean and standard deviation; a zero spread maps to 1.
    pub fn fit(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Some(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// A borrowed `[rows × dim]` embedding matrix.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable<'a> {
    pub name: &'a str,
    pub rows: usize,
    pub dim: usize,
    pub weights: &'a [f64],
}

impl<'a> EmbeddingTable<'a> {
    pub fn new(name: &'a str, dim: usize, weights: &'a [f64]) -> Result<Self> {
        if dim == 0 || !weights.len().is_multiple_of(dim) {
            return Err(Error::dim(format!("table {name}"), dim, weights.len()));
        }
        Ok(Self {
            name,
            rows: weights.len() / dim,
            dim,
            weights,
        })
    }

    fn check(&self, id: usize) -> Result<()> {
        if id >= self.rows {
            return Err(Error::OutOfRange {
                table: self.name.to_string(),
                index: id,
                rows: self.rows,
            });
        }
        Ok(())
    }

    pub fn row(&self, id: usize) -> Result<&'a [f64]> {
        self.check(id)?;
        Ok(&self.weights[id * self.dim..(id + 1) * self.dim])
    }
}

/// Row `value_id` of the table, i.e. the one-hot vector times the table.
pub fn embed_categorical(table: &EmbeddingTable<'_>, value_id: usize) -> Result<Vec<f64>> {
    Ok(table.row(value_id)?.to_vec())
}

pub fn embed_text(table: &EmbeddingTable<'_>, token_ids: &[u32], pooling: Pooling) -> Result<Vec<f64>> {
    pool_rows(table, token_ids, pooling).map(|(v, _)| v)
}

/// Pool looked-up rows; for max pooling also returns, per dimension, the
/// position in `token_ids` that won.
fn pool_rows(
    table: &EmbeddingTable<'_>,
    token_ids: &[u32],
    pooling: Pooling,
) -> Result<(Vec<f64>, Vec<u32>)> {
    if token_ids.is_empty() {
        return Err(Error::Empty(format!("token list for `{}`", table.name)));
    }
    let first = table.row(token_ids[0] as usize)?;
    let mut out = first.to_vec();
    let mut argmax = Vec::new();
    match pooling {
        Pooling::Mean => {
            for &id in &token_ids[1..] {
                for (o, v) in out.iter_mut().zip(table.row(id as usize)?) {
                    *o += v;
                }
            }
            let n = token_ids.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        Pooling::Max => {
            argmax = vec![0; table.dim];
            for (pos, &id) in token_ids.iter().enumerate().skip(1) {
                for (d, v) in table.row(id as usize)?.iter().enumerate() {
                    if *v > out[d] {
                        out[d] = *v;
                        argmax[d] = pos as u32;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn embed_numerical(value: f64, standardizer: Option<&Standardizer>) -> Result<Vec<f64>> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("numerical attribute value {value}")));
    }
    Ok(vec![standardizer.map_or(value, |s| s.apply(value))])
}

/// How one attribute becomes a vector once vocabularies are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeEncoder {
    Textual {
        tokenizer: BpeModel,
        dim: usize,
        pooling: Pooling,
    },
    Categorical {
        /// Index 0 is MISSING, 1 is UNK.
        values: Vec<String>,
        dim: usize,
    },
    Numerical {
        standardizer: Option<Standardizer>,
    },
}

pub const CATEGORY_MISSING: u32 = 0;
pub const CATEGORY_UNK: u32 = 1;

impl AttributeEncoder {
    pub fn dim(&self) -> usize {
        match self {
            AttributeEncoder::Textual { dim, .. } | AttributeEncoder::Categorical { dim, .. } => *dim,
            AttributeEncoder::Numerical { .. } => 1,
        }
    }

    /// Rows of the embedding table, or `None` when the attribute has no table.
    pub fn table_rows(&self) -> Option<usize> {
        match self {
            AttributeEncoder::Textual { tokenizer, .. } => Some(tokenizer.vocab_size()),
            AttributeEncoder::Categorical { values, .. } => Some(values.len()),
            AttributeEncoder::Numerical { .. } => None,
        }
    }

    /// Value vocabulary for a categorical attribute: MISSING, UNK, then the
    /// distinct observed values in sorted order.
    pub fn categorical_values<'a>(observed: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut set: Vec<String> = observed.into_iter().map(str::to_string).collect();
        set.sort();
        set.dedup();
        let mut values = vec!["<missing>".to_string(), "<unk>".to_string()];
        values.extend(set);
        values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAttribute {
    pub name: String,
    pub encoder: AttributeEncoder,
}

/// Discrete form of one attribute value, ready for table lookup.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrInput {
    Tokens(Vec<u32>),
    Value(u32),
    Number(f64),
}

/// Discrete form of one item's metadata, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub attrs: Vec<AttrInput>,
}

pub fn encode_record(record: &AttributeRecord, attrs: &[ResolvedAttribute]) -> Result<ItemFeatures> {
    if record.values.len() != attrs.len() {
        return Err(Error::dim("attribute record", attrs.len(), record.values.len()));
    }
    let mut out = Vec::with_capacity(attrs.len());
    for (value, attr) in record.values.iter().zip(attrs) {
        let input = match (&attr.encoder, value) {
            (AttributeEncoder::Textual { .. }, AttrValue::Missing) => AttrInput::Tokens(vec![MISSING_ID]),
            (AttributeEncoder::Textual { tokenizer, .. }, AttrValue::Text(s)) => {
                AttrInput::Tokens(tokenizer.encode(s))
            }
            (AttributeEncoder::Textual { tokenizer, .. }, AttrValue::Number(v)) => {
                AttrInput::Tokens(tokenizer.encode(&v.to_string()))
            }
            (AttributeEncoder::Categorical { .. }, AttrValue::Missing) => AttrInput::Value(CATEGORY_MISSING),
            (AttributeEncoder::Categorical { values, .. }, v) => {
                let label = v.label();
                let id = values[2..]
                    .binary_search(&label)
                    .map(|i| i as u32 + 2)
                    .unwrap_or(CATEGORY_UNK);
                AttrInput::Value(id)
            }
            (AttributeEncoder::Numerical { .. }, AttrValue::Missing) => AttrInput::Number(0.0),
            (AttributeEncoder::Numerical { standardizer }, AttrValue::Number(v)) => {
                AttrInput::Number(embed_numerical(*v, standardizer.as_ref())?[0])
            }
            (AttributeEncoder::Numerical { .. }, AttrValue::Text(s)) => {
                return Err(Error::Config(format!(
                    "attribute `{}` is numerical but holds text `{s}`",
                    attr.name
                )))
            }
        };
        out.push(input);
    }
    Ok(ItemFeatures { attrs: out })
}

/// Concatenated attribute vectors of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct CompoundItemVector {
    pub values: Vec<f64>,
}

/// Embed and concatenate every attribute of `record` in schema order.
/// `tables` maps attribute name to its embedding table.
pub fn compound_vector(
    record: &AttributeRecord,
    attrs: &[ResolvedAttribute],
    tables: &HashMap<&str, EmbeddingTable<'_>>,
) -> Result<CompoundItemVector> {
    let features = encode_record(record, attrs)?;
    let mut values = Vec::new();
    for (attr, input) in attrs.iter().zip(&features.attrs) {
        let part = match (&attr.encoder, input) {
            (AttributeEncoder::Numerical { .. }, AttrInput::Number(v)) => vec![*v],
            (enc, input) => {
                let table = tables
                    .get(attr.name.as_str())
                    .ok_or_else(|| Error::Config(format!("no embedding table for `{}`", attr.name)))?;
                if table.dim != enc.dim() {
                    return Err(Error::dim(format!("table {}", attr.name), enc.dim(), table.dim));
                }
                if Some(table.rows) != enc.table_rows() {
                    return Err(Error::dim(
                        format!("rows of table {}", attr.name),
                        enc.table_rows().unwrap_or(0),
                        table.rows,
                    ));
                }
                match (enc, input) {
                    (AttributeEncoder::Textual { pooling, .. }, AttrInput::Tokens(ids)) => {
                        embed_text(table, ids, *pooling)?
                    }
                    (AttributeEncoder::Categorical { .. }, AttrInput::Value(id)) => {
                        embed_categorical(table, *id as usize)?
                    }
                    _ => unreachable!("encode_record pairs inputs with their encoder"),
                }
            }
        };
        values.extend(part);
    }
    Ok(CompoundItemVector { values })
}

/// Metadata encoder wired into a parameter store.
#[derive(Debug, Clone)]
pub struct MetadataEncoder {
    pub attrs: Vec<ResolvedAttribute>,
    pub tables: Vec<Option<ParamId>>,
    pub dim: usize,
}

/// Per-item values needed to backpropagate through pooling.
#[derive(Debug, Clone, Default)]
pub struct ItemCache {
    argmax: Vec<Vec<u32>>,
}

impl MetadataEncoder {
    pub fn build(
        attrs: Vec<ResolvedAttribute>,
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let mut tables = Vec::with_capacity(attrs.len());
        for attr in &attrs {
            let id = attr.encoder.table_rows().map(|rows| {
                let dim = attr.encoder.dim();
                store.add_uniform(
                    format!("embedding.{}", attr.name),
                    format!("embedding.{}", attr.name),
                    crate::params::TensorRole::FeatureEmbedding,
                    vec![rows, dim],
                    1.0 / (dim as f64).sqrt(),
                    rng,
                )
            });
            tables.push(id);
        }
        let dim = attrs.iter().map(|a| a.encoder.dim()).sum();
        Self { attrs, tables, dim }
    }

    fn table<'a>(&'a self, store: &'a ParamStore, i: usize) -> EmbeddingTable<'a> {
        let id = self.tables[i].expect("attribute has a table");
        EmbeddingTable {
            name: &self.attrs[i].name,
            rows: self.attrs[i].encoder.table_rows().unwrap_or(0),
            dim: self.attrs[i].encoder.dim(),
            weights: store.get(id),
        }
    }

    pub fn forward(&self, store: &ParamStore, item: &ItemFeatures) -> Result<(Vec<f64>, ItemCache)> {
        let mut out = Vec::with_capacity(self.dim);
        let mut cache = ItemCache {
            argmax: Vec::with_capacity(self.attrs.len()),
        };
        for (i, (attr, input)) in self.attrs.iter().zip(&item.attrs).enumerate() {
            let mut argmax = Vec::new();
            match (&attr.encoder, input) {
                (AttributeEncoder::Textual { pooling, .. }, AttrInput::Tokens(ids)) => {
                    let (v, am) = pool_rows(&self.table(store, i), ids, *pooling)?;
                    out.extend(v);
                    argmax = am;
                }
                (AttributeEncoder::Categorical { .. }, AttrInput::Value(id)) => {
                    out.extend_from_slice(self.table(store, i).row(*id as usize)?);
                }
                (AttributeEncoder::Numerical { .. }, AttrInput::Number(v)) => out.push(*v),
                _ => return Err(Error::Config(format!("input kind mismatch for `{}`", attr.name))),
            }
            cache.argmax.push(argmax);
        }
        Ok((out, cache))
    }

    /// Scatter the gradient of one compound vector into the embedding tables.
    pub fn backward(&self, item: &ItemFeatures, cache: &ItemCache, grad: &[f64], grads: &mut Grads) {
        let mut offset = 0;
        for (i, (attr, input)) in self.attrs.iter().zip(&item.attrs).enumerate() {
            let dim = attr.encoder.dim();
            let g = &grad[offset..offset + dim];
            offset += dim;
            let Some(tid) = self.tables[i] else { continue };
            let table = grads.get_mut(tid);
            match (&attr.encoder, input) {
                (AttributeEncoder::Textual { pooling: Pooling::Mean, .. }, AttrInput::Tokens(ids)) => {
                    let scale = 1.0 / ids.len() as f64;
                    for &id in ids {
                        let row = &mut table[id as usize * dim..(id as usize + 1) * dim];
                        for (r, gv) in row.iter_mut().zip(g) {
                            *r += gv * scale;
                        }
                    }
                }
                (AttributeEncoder::Textual { pooling: Pooling::Max, .. }, AttrInput::Tokens(ids)) => {
                    for (d, &pos) in cache.argmax[i].iter().enumerate() {
                        let id = ids[pos as usize] as usize;
                        table[id * dim + d] += g[d];
                    }
                }
                (AttributeEncoder::Categorical { .. }, AttrInput::Value(id)) => {
                    let row = &mut table[*id as usize * dim..(*id as usize + 1) * dim];
                    for (r, gv) in row.iter_mut().zip(g) {
                        *r += gv;
                    }
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    #[test]
    fn categorical_identity_table() {
        let w = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = EmbeddingTable::new("c", 3, &w).unwrap();
        assert_eq!(embed_categorical(&t, 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(embed_categorical(&t, 3), Err(Error::OutOfRange { index: 3, .. })));
    }

    #[test]
    fn one_hot_product_equals_lookup() {
        let (rows, dim) = (5, 4);
        let w: Vec<f64> = (0..rows * dim).map(|i| ((i * 7919) % 13) as f64 * 0.1 - 0.6).collect();
        let t = EmbeddingTable::new("c", dim, &w).unwrap();
        for c in 0..rows {
            let one_hot: Vec<f64> = (0..rows).map(|r| if r == c { 1.0 } else { 0.0 }).collect();
            let dense: Vec<f64> = (0..dim)
                .map(|d| (0..rows).map(|r| one_hot[r] * w[r * dim + d]).sum())
                .collect();
            assert_eq!(embed_categorical(&t, c).unwrap(), dense);
        }
    }

    #[test]
    fn text_pooling_arithmetic() {
        let w = [9.0, 9.0, 1.0, 0.0, 3.0, 2.0];
        let t = EmbeddingTable::new("t", 2, &w).unwrap();
        assert_eq!(embed_text(&t, &[1, 2], Pooling::Mean).unwrap(), vec![2.0, 1.0]);
        assert_eq!(embed_text(&t, &[1, 2], Pooling::Max).unwrap(), vec![3.0, 2.0]);
        for p in [Pooling::Mean, Pooling::Max] {
            assert_eq!(embed_text(&t, &[2], p).unwrap(), vec![3.0, 2.0]);
        }
        assert_eq!(
            embed_text(&t, &[1, 1, 1], Pooling::Mean).unwrap(),
            embed_text(&t, &[1], Pooling::Mean).unwrap()
        );
        assert!(matches!(embed_text(&t, &[], Pooling::Mean), Err(Error::Empty(_))));
    }

    #[test]
    fn numerical_values() {
        assert_eq!(embed_numerical(3.5, None).unwrap(), vec![3.5]);
        assert!(embed_numerical(f64::NAN, None).is_err());
        assert!(embed_numerical(f64::INFINITY, None).is_err());
    }

    #[test]
    fn standardization_matches_recount() {
        let train = [1.0, 3.0, 1.0, 3.0];
        let mean = train.iter().sum::<f64>() / 4.0;
        let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_eq!((mean, var), (2.0, 1.0));
        let s = Standardizer::fit(&train).unwrap();
        assert_eq!(embed_numerical(3.5, Some(&s)).unwrap(), vec![1.5]);
    }

    #[test]
    fn default_dim_cases() {
        assert_eq!(default_dim(16, 6.0, 8, 128), 12);
        assert_eq!(default_dim(1, 6.0, 8, 128), 8);
        assert_eq!(default_dim(100_000_000, 6.0, 8, 128), 128);
        let mut prev = 0;
        for v in (1..200_000).step_by(997) {
            let d = default_dim(v, 6.0, 8, 128);
            assert!(d >= prev);
            prev = d;
        }
    }

    fn two_attr_fixture() -> (Vec<ResolvedAttribute>, Vec<f64>, Vec<f64>) {
        let tok = train_bpe(["red hammer", "blue hammer", "red paint"], 30).unwrap();
        let rows = tok.vocab_size();
        let attrs = vec![
            ResolvedAttribute {
                name: "title".into(),
                encoder: AttributeEncoder::Textual {
                    tokenizer: tok,
                    dim: 2,
                    pooling: Pooling::Mean,
                },
            },
            ResolvedAttribute {
                name: "category".into(),
                encoder: AttributeEncoder::Categorical {
                    values: AttributeEncoder::categorical_values(["tools", "paint"]),
                    dim: 3,
                },
            },
        ];
        let t1: Vec<f64> = (0..rows * 2).map(|i| i as f64 * 0.01).collect();
        let t2: Vec<f64> = (0..4 * 3).map(|i| 1.0 + i as f64).collect();
        (attrs, t1, t2)
    }

    fn rec(title: &str, cat: &str) -> AttributeRecord {
        AttributeRecord {
            values: vec![AttrValue::Text(title.into()), AttrValue::Text(cat.into())],
        }
    }

    #[test]
    fn compound_concatenates_in_schema_order() {
        let (attrs, t1, t2) = two_attr_fixture();
        let mut tables = HashMap::new();
        tables.insert("title", EmbeddingTable::new("title", 2, &t1).unwrap());
        tables.insert("category", EmbeddingTable::new("category", 3, &t2).unwrap());
        let v = compound_vector(&rec("red hammer", "tools"), &attrs, &tables).unwrap();
        assert_eq!(v.values.len(), 5);
        let title_ids = match &encode_record(&rec("red hammer", "tools"), &attrs).unwrap().attrs[0] {
            AttrInput::Tokens(ids) => ids.clone(),
            _ => unreachable!(),
        };
        let title = embed_text(&tables["title"], &title_ids, Pooling::Mean).unwrap();
        assert_eq!(&v.values[..2], title.as_slice());
        // "tools" sorts after "paint": index 3
        assert_eq!(&v.values[2..], &t2[9..12]);
    }

    #[test]
    fn identical_metadata_identical_vector() {
        let (attrs, t1, t2) = two_attr_fixture();
        let mut tables = HashMap::new();
        tables.insert("title", EmbeddingTable::new("title", 2, &t1).unwrap());
        tables.insert("category", EmbeddingTable::new("category", 3, &t2).unwrap());
        let x = compound_vector(&rec("blue hammer", "tools"), &attrs, &tables).unwrap();
        let y = compound_vector(&rec("blue hammer", "tools"), &attrs, &tables).unwrap();
        let bits = |v: &CompoundItemVector| v.values.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn dimension_mismatch_detected() {
        let (attrs, t1, t2) = two_attr_fixture();
        let mut tables = HashMap::new();
        tables.insert("title", EmbeddingTable::new("title", 2, &t1).unwrap());
        tables.insert("category", EmbeddingTable::new("category", 4, &t2).unwrap());
        assert!(matches!(
            compound_vector(&rec("red", "tools"), &attrs, &tables),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn missing_and_unknown_values() {
        let (attrs, _, _) = two_attr_fixture();
        let f = encode_record(
            &AttributeRecord {
                values: vec![AttrValue::Missing, AttrValue::Text("garden".into())],
            },
            &attrs,
        )
        .unwrap();
        assert_eq!(f.attrs[0], AttrInput::Tokens(vec![MISSING_ID]));
        assert_eq!(f.attrs[1], AttrInput::Value(CATEGORY_UNK));
    }
}
