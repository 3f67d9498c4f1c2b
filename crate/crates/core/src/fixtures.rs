//! Small prepared datasets and models shared by unit tests.

use crate::config::RunConfig;
use crate::data::LoadedSessions;
use crate::features::{AttributeKind, AttributeSpec, FeatureSchema};
use crate::heads::{TaskRequest, Variant};
use crate::model::Model;
use crate::pipeline::{model_spec, prepare_from, PreparedData};
use crate::synthetic::{category_corpus, CategoryConfig};
use crate::transformer::TransformerConfig;

pub fn tiny_transformer() -> TransformerConfig {
    TransformerConfig {
        num_layers: 1,
        num_heads: 2,
        model_dim: 8,
        ffn_hidden: 12,
        max_seq_len: 6,
        dropout: 0.0,
        ..TransformerConfig::default()
    }
}

pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::from_value(serde_json::json!({
        "paths": {"catalog": "c.tsv", "sessions": "s.jsonl", "output_dir": "out"},
        "variant": "M2TRec",
        "schema": {"attributes": [{"name": "title"}]},
        "tasks": [{"name": "item"}]
    }))
    .expect("valid config");
    c.schema = FeatureSchema {
        attributes: vec![
            AttributeSpec::textual("title").with_dim(4).with_vocab(40),
            AttributeSpec::textual("brand").with_dim(3).with_vocab(30),
            AttributeSpec::textual("category").with_kind(AttributeKind::Categorical).with_dim(3),
        ],
        standardize_numerical: false,
    };
    c.tasks.push(TaskRequest::new("category"));
    c.transformer = tiny_transformer();
    c.id_embedding_dim = 5;
    c.training.batch_size = 8;
    c
}

pub fn tiny_data(config: &RunConfig) -> PreparedData {
    let (catalog, sessions) = category_corpus(&CategoryConfig::tiny());
    prepare_from(catalog, LoadedSessions { sessions, dropped: 0 }, config).expect("prepare")
}

pub fn tiny_model(variant: Variant, seed: u64) -> (Model, PreparedData) {
    let config = tiny_config();
    let data = tiny_data(&config);
    let spec = model_spec(&data, &config, variant).expect("spec");
    (Model::build(spec, seed).expect("build"), data)
}
