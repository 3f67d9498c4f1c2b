//! End-to-end steps shared by the command-line tool and the tests: dataset
//! preparation, training one variant, and evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    build_frequency_index, generate_examples, is_sparse_session, load_catalog, load_sessions, sessions_to_jsonl,
    temporal_split, ItemCatalog, ITEM_TASK, ItemFrequencyIndex, LoadedSessions, Session, TrainingExample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::{AttributeEncoder, ResolvedAttribute};
use crate::heads::Variant;
use crate::model::{resolve_attributes, ItemTable, Model, ModelSpec};
use crate::training::{fit, EpochRecord, FitOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub catalog_items: usize,
    pub sessions_kept: usize,
    pub sessions_dropped: usize,
    pub boundary: i64,
    pub train_sessions: usize,
    pub valid_sessions: usize,
    pub test_sessions: usize,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub test_examples: usize,
    /// Examples whose target item is missing from the catalog.
    pub unresolved_targets: usize,
    pub test_sparse_examples: usize,
    pub test_tail_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub catalog: ItemCatalog,
    pub train_sessions: Vec<Session>,
    pub valid_sessions: Vec<Session>,
    pub test_sessions: Vec<Session>,
    pub train: Vec<TrainingExample>,
    pub valid: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    /// Built from `train` only.
    pub index: ItemFrequencyIndex,
    pub stats: PrepareStats,
}

fn split_boundary(sessions: &[Session], test_fraction: f64) -> Result<i64> {
    let mut ts: Vec<i64> = sessions.iter().map(|s| s.timestamp).collect();
    if ts.is_empty() {
        return Err(Error::Empty("session log after filtering".into()));
    }
    ts.sort_unstable();
    let idx = (((1.0 - test_fraction) * ts.len() as f64).floor() as usize).min(ts.len() - 1);
    Ok(ts[idx])
}

fn examples_for(sessions: &[Session], catalog: &ItemCatalog, tasks: &[String], unresolved: &mut usize) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for s in sessions {
        let g = generate_examples(s, catalog, tasks)?;
        *unresolved += g.unresolved_targets;
        out.extend(g.examples);
    }
    Ok(out)
}

/// Split, hold out validation sessions and generate examples.
pub fn prepare_from(catalog: ItemCatalog, loaded: LoadedSessions, config: &RunConfig) -> Result<PreparedData> {
    let split = &config.split;
    let boundary = match split.boundary {
        Some(b) => b,
        None => split_boundary(&loaded.sessions, split.test_fraction)?,
    };
    let sessions_kept = loaded.sessions.len();
    let (train_all, test_sessions) = temporal_split(loaded.sessions, boundary);
    let mut order: Vec<usize> = (0..train_all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x7661_6c69_6421));
    let n_valid = ((split.valid_fraction * train_all.len() as f64).ceil() as usize).min(train_all.len().saturating_sub(1));
    let held: BTreeSet<usize> = order[..n_valid].iter().copied().collect();
    let (mut train_sessions, mut valid_sessions) = (Vec::new(), Vec::new());
    for (i, s) in train_all.into_iter().enumerate() {
        if held.contains(&i) {
            valid_sessions.push(s);
        } else {
            train_sessions.push(s);
        }
    }
    let mut tasks = vec![ITEM_TASK.to_string()];
    tasks.extend(config.category_tasks());
    let mut unresolved = 0;
    let train = examples_for(&train_sessions, &catalog, &tasks, &mut unresolved)?;
    let valid = examples_for(&valid_sessions, &catalog, &tasks, &mut unresolved)?;
    let test = examples_for(&test_sessions, &catalog, &tasks, &mut unresolved)?;
    let index = build_frequency_index(&train, config.eval.tail_threshold)?;
    let sparse = test.iter().filter(|e| is_sparse_session(e, &index, config.eval.sparse_mode)).count();
    let stats = PrepareStats {
        catalog_items: catalog.len(),
        sessions_kept,
        sessions_dropped: loaded.dropped,
        boundary,
        train_sessions: train_sessions.len(),
        valid_sessions: valid_sessions.len(),
        test_sessions: test_sessions.len(),
        train_examples: train.len(),
        valid_examples: valid.len(),
        test_examples: test.len(),
        unresolved_targets: unresolved,
        test_sparse_examples: sparse,
        test_tail_fraction: if test.is_empty() { 0.0 } else { sparse as f64 / test.len() as f64 },
    };
    Ok(PreparedData {
        catalog,
        train_sessions,
        valid_sessions,
        test_sessions,
        train,
        valid,
        test,
        index,
        stats,
    })
}

/// Load the raw files named in the config and prepare them.
pub fn prepare(config: &RunConfig) -> Result<PreparedData> {
    let catalog = load_catalog(&config.paths.catalog, &config.schema)?;
    let sessions = load_sessions(&config.paths.sessions, config.split.min_session_length)?;
    prepare_from(catalog, sessions, config)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn examples_jsonl(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct VocabStat<'a> {
    attribute: &'a str,
    kind: &'static str,
    vocab_size: usize,
    embedding_dim: usize,
    merges: usize,
}

/// Write tokenizers, vocabulary stats, example files and the frequency index.
pub fn write_artifacts(prepared: &PreparedData, config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let tok_dir = dir.join("tokenizers");
    fs::create_dir_all(&tok_dir).map_err(|e| Error::io(&tok_dir, e))?;
    let mut written = Vec::new();
    let attrs = resolve_all_attributes(prepared, config)?;
    let mut stats = Vec::new();
    for a in &attrs {
        let (kind, vocab, merges) = match &a.encoder {
            AttributeEncoder::Textual { tokenizer, .. } => {
                write(tok_dir.join(format!("{}.json", a.name)), tokenizer.to_json(), &mut written)?;
                ("textual", tokenizer.vocab_size(), tokenizer.merges().len())
            }
            AttributeEncoder::Categorical { values, .. } => ("categorical", values.len(), 0),
            AttributeEncoder::Numerical { .. } => ("numerical", 0, 0),
        };
        stats.push(VocabStat {
            attribute: &a.name,
            kind,
            vocab_size: vocab,
            embedding_dim: a.encoder.dim(),
            merges,
        });
    }
    write(dir.join("vocab_stats.json"), serde_json::to_string_pretty(&stats)?, &mut written)?;
    write(dir.join("train.jsonl"), examples_jsonl(&prepared.train), &mut written)?;
    write(dir.join("valid.jsonl"), examples_jsonl(&prepared.valid), &mut written)?;
    write(dir.join("test.jsonl"), examples_jsonl(&prepared.test), &mut written)?;
    write(dir.join("test_sessions.jsonl"), sessions_to_jsonl(&prepared.test_sessions), &mut written)?;
    write(dir.join("frequency_index.json"), serde_json::to_string_pretty(&prepared.index)?, &mut written)?;
    write(dir.join("summary.json"), serde_json::to_string_pretty(&prepared.stats)?, &mut written)?;
    Ok(written)
}

fn train_items(examples: &[TrainingExample]) -> BTreeSet<String> {
    let mut items = BTreeSet::new();
    for e in examples {
        items.extend(e.prefix.iter().cloned());
        items.insert(e.target_item().to_string());
    }
    items
}

/// Tokenizers and value sets for every schema attribute, from the full catalog.
pub fn resolve_all_attributes(prepared: &PreparedData, config: &RunConfig) -> Result<Vec<ResolvedAttribute>> {
    resolve_attributes(&config.attribute_names(), &config.schema, &prepared.catalog, &train_items(&prepared.train))
}

pub fn model_spec(prepared: &PreparedData, config: &RunConfig, variant: Variant) -> Result<ModelSpec> {
    let plan = config.plan(variant)?;
    ModelSpec::resolve(&plan, &config.schema, &prepared.catalog, &prepared.train, config.transformer.clone())
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub outcome: FitOutcome,
    pub table: ItemTable,
}

impl TrainedModel {
    pub fn model(&self) -> &Model {
        &self.outcome.model
    }
}

/// Build and fit one variant with the config's training settings.
pub fn train_variant(
    prepared: &PreparedData,
    config: &RunConfig,
    variant: Variant,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    let spec = model_spec(prepared, config, variant)?;
    let model = Model::build(spec, seed)?;
    let table = model.item_table(&prepared.catalog)?;
    let train = model.encode_examples(&prepared.train, &table);
    let valid = model.encode_examples(&prepared.valid, &table);
    let outcome = fit(model, &table, &train, &valid, &config.training, seed, config.exec, on_epoch)?;
    Ok(TrainedModel { outcome, table })
}

pub fn evaluate_on_test(model: &Model, table: &ItemTable, prepared: &PreparedData, config: &RunConfig, k: usize) -> Result<EvalReport> {
    evaluate(model, table, &prepared.test, &prepared.index, config.eval.sparse_mode, k, config.exec)
}

/// Everything `train` produces: the checkpoint file contents and the log.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: Vec<u8>,
    pub history: Vec<EpochRecord>,
    pub stop: crate::training::StopReason,
    pub parameters: usize,
}

/// Prepare, fit the configured variant and serialize the best model.
pub fn train_to_checkpoint(config: &RunConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainArtifacts> {
    let prepared = prepare(config)?;
    train_prepared_to_checkpoint(&prepared, config, on_epoch)
}

pub fn train_prepared_to_checkpoint(
    prepared: &PreparedData,
    config: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainArtifacts> {
    let trained = train_variant(prepared, config, config.variant, config.seed, on_epoch)?;
    let run = serde_json::to_value(config)?;
    let outcome = trained.outcome;
    let checkpoint = crate::checkpoint::to_bytes(&outcome.model, &run, &outcome.history)?;
    Ok(TrainArtifacts {
        checkpoint,
        history: outcome.history,
        stop: outcome.stop,
        parameters: outcome.model.parameter_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::tiny_config;
    use crate::synthetic::{category_corpus, CategoryConfig};

    #[test]
    fn example_counts_add_up() {
        let (catalog, sessions) = category_corpus(&CategoryConfig::tiny());
        let expected: usize = sessions.iter().map(|s| s.len() - 1).sum();
        let p = prepare_from(catalog, LoadedSessions { sessions, dropped: 0 }, &tiny_config()).unwrap();
        let s = &p.stats;
        assert_eq!(s.train_examples + s.valid_examples + s.test_examples, expected);
        assert_eq!(s.train_sessions + s.valid_sessions + s.test_sessions, s.sessions_kept);
        assert!(s.test_sessions >= 8 && s.valid_sessions >= 1);
        assert!(p.test_sessions.iter().all(|t| t.timestamp >= s.boundary));
        assert!(p.train_sessions.iter().all(|t| t.timestamp < s.boundary));
    }

    #[test]
    fn preparation_is_deterministic() {
        let (catalog, sessions) = category_corpus(&CategoryConfig::tiny());
        let a = prepare_from(catalog.clone(), LoadedSessions { sessions: sessions.clone(), dropped: 0 }, &tiny_config()).unwrap();
        let b = prepare_from(catalog, LoadedSessions { sessions, dropped: 0 }, &tiny_config()).unwrap();
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.stats, b.stats);
    }
}
