//! Seeded synthetic corpora with known structure, used by tests, benches and
//! the `synth` command.

use std::collections::BTreeSet;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{AttrValue, AttributeRecord, ItemCatalog, Session};
use crate::features::{AttributeKind, AttributeSpec, FeatureSchema};

/// Every item `i` is always followed by `(i + 1) mod items`. Each title is a
/// single character unique to its item, so it tokenizes to one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessorConfig {
    pub items: usize,
    pub categories: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SuccessorConfig {
    fn default() -> Self {
        Self {
            items: 50,
            categories: 5,
            sessions: 5000,
            min_len: 2,
            max_len: 6,
            seed: 7,
        }
    }
}

pub fn successor_schema() -> FeatureSchema {
    FeatureSchema {
        attributes: vec![
            AttributeSpec::textual("title").with_dim(16),
            AttributeSpec::textual("category").with_kind(AttributeKind::Categorical).with_dim(8),
        ],
        standardize_numerical: false,
    }
}

fn successor_item(i: usize) -> String {
    format!("s{i:03}")
}

pub fn successor_corpus(cfg: &SuccessorConfig) -> (ItemCatalog, Vec<Session>) {
    let mut catalog = ItemCatalog::new(schema_kinds(&successor_schema()));
    for i in 0..cfg.items {
        let title = char::from_u32(0x4E00 + i as u32).expect("valid code point").to_string();
        let record = AttributeRecord {
            values: vec![AttrValue::Text(title), AttrValue::Text(format!("g{}", i % cfg.categories.max(1)))],
        };
        catalog.insert(successor_item(i), record).expect("unique ids");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sessions = (0..cfg.sessions)
        .map(|s| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let start = rng.gen_range(0..cfg.items);
            Session {
                session_id: format!("succ{s:05}"),
                timestamp: s as i64,
                events: (0..len).map(|j| successor_item((start + j) % cfg.items)).collect(),
            }
        })
        .collect();
    (catalog, sessions)
}

/// Sessions walk between categories: the next category is a fixed successor
/// of the current one with probability `p_successor`, the same category with
/// `p_stay`, otherwise uniform. "Mainstream" sessions draw popular items with
/// Zipf-like weights; "niche" sessions draw uniformly from each category's
/// long tail. Titles share a category word, so metadata carries the category
/// even for rarely seen items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryConfig {
    pub categories: usize,
    pub head_items: usize,
    pub tail_items: usize,
    pub sessions: usize,
    pub niche_fraction: f64,
    pub p_successor: f64,
    pub p_stay: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            categories: 40,
            head_items: 6,
            tail_items: 40,
            sessions: 4000,
            niche_fraction: 0.36,
            p_successor: 0.6,
            p_stay: 0.2,
            min_len: 2,
            max_len: 5,
            seed: 11,
        }
    }
}

impl CategoryConfig {
    /// A few dozen sessions over a handful of items; for unit tests.
    pub fn tiny() -> Self {
        Self {
            categories: 4,
            head_items: 2,
            tail_items: 2,
            sessions: 40,
            ..Self::default()
        }
    }
}

pub fn category_schema() -> FeatureSchema {
    FeatureSchema {
        attributes: vec![
            AttributeSpec::textual("title"),
            AttributeSpec::textual("brand"),
            AttributeSpec::textual("category").with_kind(AttributeKind::Categorical),
        ],
        standardize_numerical: false,
    }
}

fn schema_kinds(schema: &FeatureSchema) -> Vec<(String, AttributeKind)> {
    schema.attributes.iter().map(|a| (a.name.clone(), a.kind)).collect()
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "ze", "pa", "qu", "do", "fe", "gi", "ho", "ju", "be", "ci", "wy",
    "xo", "an", "el", "or", "us",
];

fn word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn unique_words(rng: &mut impl Rng, n: usize, syllables: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// The fixed category transition used by [`category_corpus`].
pub fn successor_category(c: usize, categories: usize) -> usize {
    // 7 is coprime with the default 40 categories, making this a permutation
    (c * 7 + 3) % categories
}

pub fn category_item(c: usize, tail: bool, j: usize) -> String {
    format!("c{c:02}{}{j:02}", if tail { 't' } else { 'h' })
}

pub fn category_corpus(cfg: &CategoryConfig) -> (ItemCatalog, Vec<Session>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = BTreeSet::new();
    let cat_words = unique_words(&mut rng, cfg.categories, 2, &mut taken);
    let brands = unique_words(&mut rng, cfg.categories.div_ceil(2).max(1), 2, &mut taken);
    let mut catalog = ItemCatalog::new(schema_kinds(&category_schema()));
    for (c, cw) in cat_words.iter().enumerate() {
        let n = cfg.head_items + cfg.tail_items;
        let names = unique_words(&mut rng, n, 3, &mut taken);
        for (j, name) in names.iter().enumerate() {
            let tail = j >= cfg.head_items;
            let idx = if tail { j - cfg.head_items } else { j };
            let brand = &brands[(c / 2 + j % 2) % brands.len()];
            let record = AttributeRecord {
                values: vec![
                    AttrValue::Text(format!("{cw} {name}")),
                    AttrValue::Text(brand.clone()),
                    AttrValue::Text(format!("cat{c:02}")),
                ],
            };
            catalog.insert(category_item(c, tail, idx), record).expect("unique ids");
        }
    }
    let zipf = WeightedIndex::new((0..cfg.head_items.max(1)).map(|r| 1.0 / (r as f64 + 1.0))).expect("positive weights");
    let sessions = (0..cfg.sessions)
        .map(|s| {
            let niche = rng.gen_bool(cfg.niche_fraction) && cfg.tail_items > 0;
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut c = rng.gen_range(0..cfg.categories);
            let mut events = Vec::with_capacity(len);
            for step in 0..len {
                if step > 0 {
                    let u: f64 = rng.gen();
                    c = if u < cfg.p_successor {
                        successor_category(c, cfg.categories)
                    } else if u < cfg.p_successor + cfg.p_stay {
                        c
                    } else {
                        rng.gen_range(0..cfg.categories)
                    };
                }
                events.push(if niche {
                    category_item(c, true, rng.gen_range(0..cfg.tail_items))
                } else {
                    category_item(c, false, zipf.sample(&mut rng))
                });
            }
            Session {
                session_id: format!("cat{s:05}"),
                timestamp: s as i64,
                events,
            }
        })
        .collect();
    (catalog, sessions)
}

/// Small-model run configuration used with the synthetic corpora: one
/// encoder layer, width 32, item and category tasks.
pub fn desk_config(schema: FeatureSchema, catalog: &str, sessions: &str, output_dir: &str) -> RunConfig {
    let mut config = RunConfig::from_value(serde_json::json!({
        "paths": {"catalog": catalog, "sessions": sessions, "output_dir": output_dir},
        "variant": "M2TRec",
        "schema": serde_json::to_value(&schema).expect("schema serializes"),
        "tasks": [{"name": "item"}, {"name": "category"}],
        "transformer": {"num_layers": 1, "num_heads": 4, "model_dim": 32, "ffn_hidden": 64, "dropout": 0.1},
        "id_embedding_dim": 32,
        "training": {"batch_size": 64, "max_epochs": 30, "optimizer": {"learning_rate": 0.003}}
    }))
    .expect("desk config is valid");
    config.schema = schema;
    config
}
