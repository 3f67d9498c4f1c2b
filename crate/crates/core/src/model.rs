//! Model assembly: input layer (metadata or item-ID), session encoder and
//! task heads over one parameter registry.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttrValue, AttributeRecord, ItemCatalog, TrainingExample, ITEM_TASK};
use crate::error::{Error, Result};
use crate::features::{
    default_dim, encode_record, AttributeEncoder, AttributeKind, FeatureSchema, ItemCache, ItemFeatures,
    MetadataEncoder, ResolvedAttribute, Standardizer, DEFAULT_DIM_ALPHA, DEFAULT_DIM_MAX, DEFAULT_DIM_MIN,
};
use crate::heads::{
    head_backward, head_forward, task_loss, top_k, HeadParams, InputPlan, LabelMap, TaskSpec, Variant,
    VariantPlan,
};
use crate::params::{Grads, ParamId, ParamStore, TensorRole};
use crate::tokenizer::{train_bpe, BpeFile, BpeModel, Specials};
use crate::transformer::{EncoderCache, Mode, SessionEncoder, TransformerConfig};

pub const DEFAULT_TEXT_VOCAB: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSpec {
    Metadata { attributes: Vec<ResolvedAttribute> },
    /// Row 0 is reserved for items outside `items`.
    ItemId { items: Vec<String>, dim: usize },
}

impl InputSpec {
    pub fn dim(&self) -> usize {
        match self {
            InputSpec::Metadata { attributes } => attributes.iter().map(|a| a.encoder.dim()).sum(),
            InputSpec::ItemId { dim, .. } => *dim,
        }
    }
}

/// Everything needed to rebuild a model's architecture, vocabularies and label
/// spaces. Stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub transformer: TransformerConfig,
    pub input: InputSpec,
    pub tasks: Vec<TaskSpec>,
}

/// Per-attribute tokenizer vocabulary and value sets derived from the catalog.
pub fn resolve_attributes(
    names: &[String],
    schema: &FeatureSchema,
    catalog: &ItemCatalog,
    train_items: &BTreeSet<String>,
) -> Result<Vec<ResolvedAttribute>> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let spec = schema
            .get(name)
            .ok_or_else(|| Error::Config(format!("attribute `{name}` missing from schema")))?;
        let col = catalog
            .attribute_index(name)
            .ok_or_else(|| Error::Config(format!("attribute `{name}` missing from catalog")))?;
        let values = catalog.iter().map(|(_, r)| &r.values[col]);
        let encoder = match spec.kind {
            AttributeKind::Textual => {
                let corpus: Vec<String> = values
                    .filter(|v| !v.is_missing())
                    .map(AttrValue::label)
                    .collect();
                let tokenizer = if corpus.iter().all(|s| s.trim().is_empty()) {
                    BpeModel::try_from(BpeFile {
                        alphabet: Vec::new(),
                        merges: Vec::new(),
                        specials: Specials::default(),
                    })?
                } else {
                    let vocab = match spec.vocab_size {
                        Some(v) => v,
                        None => {
                            let alphabet: BTreeSet<char> =
                                corpus.iter().flat_map(|s| s.to_lowercase().chars().collect::<Vec<_>>()).collect();
                            DEFAULT_TEXT_VOCAB.max(alphabet.len() + 3)
                        }
                    };
                    train_bpe(&corpus, vocab)?
                };
                let dim = spec.embedding_dim.unwrap_or_else(|| {
                    default_dim(tokenizer.vocab_size(), DEFAULT_DIM_ALPHA, DEFAULT_DIM_MIN, DEFAULT_DIM_MAX)
                });
                AttributeEncoder::Textual {
                    tokenizer,
                    dim,
                    pooling: spec.pooling,
                }
            }
            AttributeKind::Categorical => {
                let labels: Vec<String> = values.filter(|v| !v.is_missing()).map(AttrValue::label).collect();
                let values = AttributeEncoder::categorical_values(labels.iter().map(String::as_str));
                let dim = spec.embedding_dim.unwrap_or_else(|| {
                    default_dim(values.len(), DEFAULT_DIM_ALPHA, DEFAULT_DIM_MIN, DEFAULT_DIM_MAX)
                });
                AttributeEncoder::Categorical { values, dim }
            }
            AttributeKind::Numerical => {
                let standardizer = if schema.standardize_numerical {
                    let xs: Vec<f64> = train_items
                        .iter()
                        .filter_map(|id| match catalog.get(id).map(|r| &r.values[col]) {
                            Some(AttrValue::Number(v)) => Some(*v),
                            _ => None,
                        })
                        .collect();
                    Standardizer::fit(&xs)
                } else {
                    None
                };
                AttributeEncoder::Numerical { standardizer }
            }
        };
        if encoder.dim() == 0 {
            return Err(Error::Config(format!("attribute `{name}` has zero embedding_dim")));
        }
        out.push(ResolvedAttribute {
            name: name.clone(),
            encoder,
        });
    }
    Ok(out)
}

impl ModelSpec {
    /// Derive vocabularies and label spaces from the catalog and training examples.
    pub fn resolve(
        plan: &VariantPlan,
        schema: &FeatureSchema,
        catalog: &ItemCatalog,
        train: &[TrainingExample],
        transformer: TransformerConfig,
    ) -> Result<Self> {
        transformer.validate()?;
        let mut train_items = BTreeSet::new();
        for ex in train {
            train_items.extend(ex.prefix.iter().cloned());
            train_items.insert(ex.target_item().to_string());
        }
        let input = match &plan.inputs {
            InputPlan::Metadata(names) => InputSpec::Metadata {
                attributes: resolve_attributes(names, schema, catalog, &train_items)?,
            },
            InputPlan::ItemId { dim } => InputSpec::ItemId {
                items: catalog.ids().to_vec(),
                dim: *dim,
            },
        };
        let mut tasks = Vec::with_capacity(plan.tasks.len());
        for req in &plan.tasks {
            let labels = if req.name == ITEM_TASK {
                LabelMap::from_observed(train_items.iter().map(String::as_str))
            } else {
                LabelMap::from_observed(train.iter().filter_map(|e| e.targets.get(&req.name).map(String::as_str)))
            };
            tasks.push(TaskSpec {
                name: req.name.clone(),
                labels,
                weight: req.weight,
            });
        }
        // item task first so index 0 is always the item head
        tasks.sort_by_key(|t| !t.is_item_task());
        Ok(Self {
            variant: plan.variant,
            transformer,
            input,
            tasks,
        })
    }
}

#[derive(Debug, Clone)]
enum InputLayer {
    Metadata(MetadataEncoder),
    ItemId {
        index: HashMap<String, u32>,
        table: ParamId,
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct Head {
    weights: ParamId,
    bias: ParamId,
}

/// Discrete input for one item.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemInput {
    Features(ItemFeatures),
    Id(u32),
}

/// Pre-encoded inputs for every catalog item plus one entry for unknown items.
#[derive(Debug, Clone)]
pub struct ItemTable {
    inputs: Vec<ItemInput>,
    index: HashMap<String, u32>,
    unknown: u32,
}

impl ItemTable {
    pub fn lookup(&self, item: &str) -> u32 {
        self.index.get(item).copied().unwrap_or(self.unknown)
    }

    pub fn input(&self, i: u32) -> &ItemInput {
        &self.inputs[i as usize]
    }

    pub fn unknown(&self) -> u32 {
        self.unknown
    }
}

/// One example resolved against a model's item table and label spaces.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub example: TrainingExample,
    pub prefix: Vec<u32>,
    /// Per model task; `None` when the example has no label for it.
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
struct ForwardState {
    prefix: Vec<u32>,
    truncated: usize,
    item_caches: Vec<ItemCache>,
    encoder: EncoderCache,
    session: Vec<f64>,
    probs: Vec<Vec<f64>>,
}

/// Activations recorded by a forward pass for the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    state: Option<ForwardState>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn probs(&self) -> Option<&[Vec<f64>]> {
        self.state.as_ref().map(|s| s.probs.as_slice())
    }

    pub fn session(&self) -> Option<&[f64]> {
        self.state.as_ref().map(|s| s.session.as_slice())
    }

    /// Leading prefix items dropped to fit `max_seq_len`.
    pub fn truncated(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.truncated)
    }

    /// Attention matrices of the last forward pass, per layer and head.
    pub fn attention(&self) -> Vec<&crate::linalg::Mat> {
        self.state
            .as_ref()
            .map(|s| s.encoder.layers.iter().flat_map(|l| l.attention.probs.iter()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub session: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    input: InputLayer,
    pub encoder: SessionEncoder,
    heads: Vec<Head>,
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.transformer.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let input = match &spec.input {
            InputSpec::Metadata { attributes } => {
                InputLayer::Metadata(MetadataEncoder::build(attributes.clone(), &mut params, &mut rng))
            }
            InputSpec::ItemId { items, dim } => {
                let table = params.add_uniform(
                    "item_id.embedding",
                    "item_id.embedding",
                    TensorRole::ItemIdEmbedding,
                    vec![items.len() + 1, *dim],
                    1.0 / (*dim as f64).sqrt(),
                    &mut rng,
                );
                let index = items.iter().enumerate().map(|(i, id)| (id.clone(), i as u32 + 1)).collect();
                InputLayer::ItemId {
                    index,
                    table,
                    dim: *dim,
                }
            }
        };
        let input_dim = spec.input.dim();
        if input_dim == 0 {
            return Err(Error::Config("model has no input features".into()));
        }
        let encoder = SessionEncoder::build(spec.transformer.clone(), input_dim, &mut params, &mut rng);
        let d = spec.transformer.model_dim;
        let mut heads = Vec::with_capacity(spec.tasks.len());
        for task in &spec.tasks {
            if task.output_size() < 2 {
                return Err(Error::Config(format!("task `{}` has fewer than 2 outputs", task.name)));
            }
            let group = format!("head.{}", task.name);
            let weights = params.add_uniform(
                format!("head.{}.weight", task.name),
                &group,
                TensorRole::Head,
                vec![d, task.output_size()],
                (1.0 / d as f64).sqrt(),
                &mut rng,
            );
            let bias = params.add_zeros(format!("head.{}.bias", task.name), &group, TensorRole::Head, vec![task.output_size()]);
            heads.push(Head { weights, bias });
        }
        Ok(Self {
            spec,
            params,
            input,
            encoder,
            heads,
        })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.spec.tasks
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.spec.tasks.iter().position(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Names of tensors with one row per catalog item.
    pub fn item_id_tensors(&self) -> Vec<&str> {
        self.params
            .tensors()
            .iter()
            .filter(|t| t.role == TensorRole::ItemIdEmbedding)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn head(&self, task: usize) -> HeadParams<'_> {
        HeadParams {
            weights: self.params.get(self.heads[task].weights),
            bias: self.params.get(self.heads[task].bias),
        }
    }

    /// Discrete inputs for every catalog item.
    pub fn item_table(&self, catalog: &ItemCatalog) -> Result<ItemTable> {
        // catalog columns the model reads, in the model's attribute order
        let columns = match &self.input {
            InputLayer::Metadata(m) => m
                .attrs
                .iter()
                .map(|a| {
                    catalog
                        .attribute_index(&a.name)
                        .ok_or_else(|| Error::MissingColumn(a.name.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
            InputLayer::ItemId { .. } => Vec::new(),
        };
        let select = |record: &AttributeRecord| AttributeRecord {
            values: columns.iter().map(|&c| record.values[c].clone()).collect(),
        };
        let mut inputs = Vec::with_capacity(catalog.len() + 1);
        let mut index = HashMap::with_capacity(catalog.len());
        for (id, record) in catalog.iter() {
            let input = match &self.input {
                InputLayer::Metadata(m) => ItemInput::Features(encode_record(&select(record), &m.attrs)?),
                InputLayer::ItemId { index, .. } => ItemInput::Id(index.get(id).copied().unwrap_or(0)),
            };
            index.insert(id.to_string(), inputs.len() as u32);
            inputs.push(input);
        }
        let unknown = inputs.len() as u32;
        inputs.push(match &self.input {
            InputLayer::Metadata(m) => ItemInput::Features(encode_record(&select(&catalog.missing_record()), &m.attrs)?),
            InputLayer::ItemId { .. } => ItemInput::Id(0),
        });
        Ok(ItemTable { inputs, index, unknown })
    }

    pub fn encode_example(&self, example: &TrainingExample, table: &ItemTable) -> EncodedExample {
        EncodedExample {
            prefix: example.prefix.iter().map(|i| table.lookup(i)).collect(),
            targets: self
                .spec
                .tasks
                .iter()
                .map(|t| example.targets.get(&t.name).map(|l| t.labels.index(l)))
                .collect(),
            example: example.clone(),
        }
    }

    pub fn encode_examples(&self, examples: &[TrainingExample], table: &ItemTable) -> Vec<EncodedExample> {
        examples.iter().map(|e| self.encode_example(e, table)).collect()
    }

    /// Input vector of one item: its compound metadata vector or its ID row.
    pub fn item_vector(&self, input: &ItemInput) -> Result<Vec<f64>> {
        self.item_forward(input).map(|(v, _)| v)
    }

    fn item_forward(&self, input: &ItemInput) -> Result<(Vec<f64>, ItemCache)> {
        match (&self.input, input) {
            (InputLayer::Metadata(m), ItemInput::Features(f)) => m.forward(&self.params, f),
            (InputLayer::ItemId { table, dim, .. }, ItemInput::Id(row)) => {
                let w = self.params.get(*table);
                let r = *row as usize;
                if (r + 1) * dim > w.len() {
                    return Err(Error::OutOfRange {
                        table: "item_id.embedding".into(),
                        index: r,
                        rows: w.len() / dim,
                    });
                }
                Ok((w[r * dim..(r + 1) * dim].to_vec(), ItemCache::default()))
            }
            _ => Err(Error::Config("item input does not match the model's input layer".into())),
        }
    }

    pub fn forward(&self, table: &ItemTable, prefix: &[u32], mode: &mut Mode<'_>, tape: &mut Tape) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Empty("session prefix".into()));
        }
        let max = self.spec.transformer.max_seq_len;
        let dropped = prefix.len().saturating_sub(max);
        let kept = &prefix[dropped..];
        let mut vectors = Vec::with_capacity(kept.len());
        let mut item_caches = Vec::with_capacity(kept.len());
        for &i in kept {
            let (v, c) = self.item_forward(table.input(i))?;
            vectors.push(v);
            item_caches.push(c);
        }
        let (session, encoder) = self.encoder.encode_session(&self.params, &vectors, mode)?;
        let probs = (0..self.heads.len())
            .map(|t| head_forward(&session.values, &self.head(t)))
            .collect::<Result<Vec<_>>>()?;
        tape.state = Some(ForwardState {
            prefix: kept.to_vec(),
            truncated: dropped,
            item_caches,
            encoder,
            session: session.values,
            probs,
        });
        Ok(())
    }

    pub fn predict(&self, table: &ItemTable, prefix: &[u32]) -> Result<Prediction> {
        let mut tape = Tape::new();
        self.forward(table, prefix, &mut Mode::Infer, &mut tape)?;
        let state = tape.state.expect("forward fills the tape");
        Ok(Prediction {
            session: state.session,
            probs: state.probs,
        })
    }

    /// Per-task cross-entropy for the tasks that have a target.
    pub fn task_losses(&self, probs: &[Vec<f64>], targets: &[Option<usize>]) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for ((task, p), t) in self.spec.tasks.iter().zip(probs).zip(targets) {
            if let Some(t) = t {
                out.insert(task.name.clone(), task_loss(p, *t)?);
            }
        }
        Ok(out)
    }

    /// Weighted multi-task loss for one example's probabilities.
    pub fn example_loss(&self, probs: &[Vec<f64>], targets: &[Option<usize>]) -> Result<f64> {
        let losses = self.task_losses(probs, targets)?;
        let weights = self
            .spec
            .tasks
            .iter()
            .filter(|t| losses.contains_key(&t.name))
            .map(|t| (t.name.clone(), t.weight))
            .collect();
        crate::heads::total_loss(&losses, &weights)
    }

    /// Backpropagate `scale ·` the weighted example loss into `grads`.
    pub fn backward(&self, tape: &Tape, table: &ItemTable, targets: &[Option<usize>], scale: f64, grads: &mut Grads) -> Result<()> {
        let state = tape.state.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let d = self.spec.transformer.model_dim;
        let mut d_session = vec![0.0; d];
        for (t, (task, target)) in self.spec.tasks.iter().zip(targets).enumerate() {
            let Some(target) = *target else { continue };
            if task.weight == 0.0 {
                continue;
            }
            let head = self.head(t);
            let [dw, db] = grads.disjoint_mut([self.heads[t].weights, self.heads[t].bias]);
            let dv = head_backward(&state.session, &head, &state.probs[t], target, scale * task.weight, dw, db);
            for (a, b) in d_session.iter_mut().zip(dv) {
                *a += b;
            }
        }
        let d_items = self.encoder.backward(&self.params, &state.encoder, &d_session, grads);
        // the model truncates before the encoder, so `d_items` has no padding rows
        for ((&item, cache), g) in state.prefix.iter().zip(&state.item_caches).zip(&d_items) {
            match (&self.input, table.input(item)) {
                (InputLayer::Metadata(m), ItemInput::Features(f)) => m.backward(f, cache, g, grads),
                (InputLayer::ItemId { table, dim, .. }, ItemInput::Id(row)) => {
                    let r = *row as usize;
                    for (a, b) in grads.get_mut(*table)[r * dim..(r + 1) * dim].iter_mut().zip(g) {
                        *a += b;
                    }
                }
                _ => return Err(Error::Config("item input does not match the model's input layer".into())),
            }
        }
        Ok(())
    }

    /// Forward + backward for one example; returns its weighted loss.
    pub fn accumulate(
        &self,
        example: &EncodedExample,
        table: &ItemTable,
        mode: &mut Mode<'_>,
        scale: f64,
        grads: &mut Grads,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        self.forward(table, &example.prefix, mode, &mut tape)?;
        let loss = self.example_loss(tape.probs().expect("forward ran"), &example.targets)?;
        self.backward(&tape, table, &example.targets, scale, grads)?;
        Ok(loss)
    }

    /// Loss of one example in inference mode, no gradients.
    pub fn loss(&self, example: &EncodedExample, table: &ItemTable) -> Result<f64> {
        let p = self.predict(table, &example.prefix)?;
        self.example_loss(&p.probs, &example.targets)
    }

    /// Top-`k` labels for task `task`, never including `OTHER`.
    pub fn rank(&self, probs: &[f64], task: usize, k: usize) -> Vec<(usize, f64)> {
        top_k(probs, k, &[self.spec.tasks[task].labels.other()])
    }

    /// Replace tensor contents by name, checking shapes.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, shape, data) in tensors {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected tensor `{name}`")))?;
            let expected = self.params.tensor(id).shape.clone();
            if expected != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected,
                    found: shape,
                });
            }
            self.params.get_mut(id).copy_from_slice(&data);
            seen.insert(name);
        }
        if let Some(missing) = self.params.tensors().iter().find(|t| !seen.contains(&t.name)) {
            return Err(Error::CorruptCheckpoint(format!("tensor `{}` missing", missing.name)));
        }
        Ok(())
    }
}
