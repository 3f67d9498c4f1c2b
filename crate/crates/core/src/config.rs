//! Run configuration: one JSON file, checked against the bundled JSON Schema
//! before it is deserialized.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::{SparseMode, ITEM_TASK};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureSchema;
use crate::heads::{build_variant, TaskRequest, Variant, VariantConfig, VariantPlan};
use crate::training::TrainConfig;
use crate::transformer::TransformerConfig;

/// JSON schema every run configuration must satisfy.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub catalog: PathBuf,
    pub sessions: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Sessions starting at or after this timestamp are test sessions. When
    /// absent, the latest `test_fraction` of sessions by timestamp are.
    pub boundary: Option<i64>,
    pub test_fraction: f64,
    /// Share of training sessions held out for validation, chosen by seed.
    pub valid_fraction: f64,
    pub min_session_length: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            boundary: None,
            test_fraction: 0.2,
            valid_fraction: 0.1,
            min_session_length: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub tail_threshold: u64,
    pub sparse_mode: SparseMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            tail_threshold: 10,
            sparse_mode: SparseMode::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub variant: Variant,
    pub schema: FeatureSchema,
    #[serde(default = "default_title")]
    pub title_attribute: String,
    pub tasks: Vec<TaskRequest>,
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default = "default_id_dim")]
    pub id_embedding_dim: usize,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

fn default_title() -> String {
    "title".into()
}

fn default_id_dim() -> usize {
    64
}

fn validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: serde_json::Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("bundled schema is JSON");
        jsonschema::validator_for(&schema).expect("bundled schema compiles")
    })
}

/// Schema violations, one line each, or `Ok` if the document conforms.
pub fn validate_document(doc: &serde_json::Value) -> Result<()> {
    let errors: Vec<String> = validator()
        .iter_errors(doc)
        .map(|e| {
            let at = e.instance_path().to_string();
            format!("{}: {e}", if at.is_empty() { "/" } else { &at })
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

impl RunConfig {
    /// Parse, schema-check, deserialize and semantically check a config.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(doc)
    }

    pub fn from_value(doc: serde_json::Value) -> Result<Self> {
        validate_document(&doc)?;
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Load from a file; relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json_str(&text)?;
        if let Some(base) = path.parent() {
            config.paths.resolve_against(base);
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.schema.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn variant_config(&self, variant: Variant) -> VariantConfig {
        variant.config(self.id_embedding_dim)
    }

    pub fn plan(&self, variant: Variant) -> Result<VariantPlan> {
        build_variant(&self.variant_config(variant), &self.attribute_names(), &self.tasks, &self.title_attribute)
    }

    /// Names of every category task requested, whatever the variant.
    pub fn category_tasks(&self) -> Vec<String> {
        self.tasks.iter().filter(|t| t.name != ITEM_TASK).map(|t| t.name.clone()).collect()
    }

    fn check(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for a in &self.schema.attributes {
            if a.name == "item_id" {
                return Err(Error::Config("`item_id` cannot be a feature attribute".into()));
            }
            if !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("attribute `{}` listed twice", a.name)));
            }
        }
        let mut tasks = BTreeSet::new();
        for t in &self.tasks {
            if !tasks.insert(t.name.as_str()) {
                return Err(Error::Config(format!("task `{}` listed twice", t.name)));
            }
        }
        self.transformer.validate()?;
        self.training.validate()?;
        self.plan(self.variant)?;
        Ok(())
    }
}

impl Paths {
    pub fn resolve_against(&mut self, base: &Path) {
        for p in [&mut self.catalog, &mut self.sessions, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
