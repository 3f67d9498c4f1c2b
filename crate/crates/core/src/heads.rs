//! Per-task softmax heads, cross-entropy, the summed multi-task loss, top-k
//! scoring, and the ablation variant table.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::ITEM_TASK;
use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place};

/// Label for test targets never seen in training.
pub const OTHER_LABEL: &str = "<other>";

/// Added inside the log so a zero probability gives a finite loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Ordered label set; `OTHER` is always the last index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelMap {
    fn from(mut labels: Vec<String>) -> Self {
        if labels.last().map(String::as_str) != Some(OTHER_LABEL) {
            labels.retain(|l| l != OTHER_LABEL);
            labels.push(OTHER_LABEL.to_string());
        }
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(m: LabelMap) -> Self {
        m.labels
    }
}

impl LabelMap {
    /// Sorted distinct observed labels plus `OTHER`.
    pub fn from_observed<'a>(observed: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<String> = observed.into_iter().map(str::to_string).collect();
        v.sort();
        v.dedup();
        Self::from(v)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn other(&self) -> usize {
        self.labels.len() - 1
    }

    /// Index of `label`, or the `OTHER` index when unseen.
    pub fn index(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or(self.other())
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied().filter(|&i| i != self.other())
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: LabelMap,
    pub weight: f64,
}

impl TaskSpec {
    pub fn is_item_task(&self) -> bool {
        self.name == ITEM_TASK
    }

    pub fn output_size(&self) -> usize {
        self.labels.len()
    }
}

/// Borrowed head parameters: `weights` is `[d_S × d_k]`, `bias` is `[d_k]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams<'a> {
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl HeadParams<'_> {
    pub fn outputs(&self) -> usize {
        self.bias.len()
    }
}

/// `softmax(v_S W + b)`.
pub fn head_forward(session: &[f64], head: &HeadParams<'_>) -> Result<Vec<f64>> {
    let k = head.outputs();
    if k == 0 || head.weights.len() != session.len() * k {
        return Err(Error::dim("head input", head.weights.len() / k.max(1), session.len()));
    }
    let mut z = head.bias.to_vec();
    for (i, &s) in session.iter().enumerate() {
        for (zj, w) in z.iter_mut().zip(&head.weights[i * k..(i + 1) * k]) {
            *zj += s * w;
        }
    }
    softmax_in_place(&mut z);
    Ok(z)
}

/// Cross-entropy against a one-hot target: `−ln(p[target] + 1e-12)`.
pub fn task_loss(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or(Error::OutOfRange {
        table: "task probabilities".into(),
        index: target,
        rows: probs.len(),
    })?;
    Ok(-(p + LOG_FLOOR).ln())
}

/// `Σ_k weight_k · L_k`. Both maps must have the same task keys.
pub fn total_loss(per_task: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64> {
    if per_task.len() != weights.len() || per_task.keys().any(|k| !weights.contains_key(k)) {
        let a: Vec<_> = per_task.keys().collect();
        let b: Vec<_> = weights.keys().collect();
        return Err(Error::TaskMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(per_task.iter().map(|(k, l)| weights[k] * l).sum())
}

/// Gradient of `scale · task_loss` through the softmax head. Accumulates into
/// `dw`/`db` and returns the gradient w.r.t. the session encoding.
pub(crate) fn head_backward(
    session: &[f64],
    head: &HeadParams<'_>,
    probs: &[f64],
    target: usize,
    scale: f64,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let k = probs.len();
    let pt = probs[target];
    let c = scale * pt / (pt + LOG_FLOOR);
    let dz: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| c * (p - if j == target { 1.0 } else { 0.0 }))
        .collect();
    for (b, g) in db.iter_mut().zip(&dz) {
        *b += g;
    }
    let mut dv = Vec::with_capacity(session.len());
    for (i, &s) in session.iter().enumerate() {
        let row = &mut dw[i * k..(i + 1) * k];
        for (w, g) in row.iter_mut().zip(&dz) {
            *w += s * g;
        }
        dv.push(dot(&head.weights[i * k..(i + 1) * k], &dz));
    }
    dv
}

/// Top `k` indices by probability, descending; ties go to the lower index.
/// Indices in `exclude` are skipped.
pub fn top_k(probs: &[f64], k: usize, exclude: &[usize]) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|i| !exclude.contains(i)).collect();
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, probs[i])).collect()
}

/// Rank item labels for a session encoding.
pub fn score_items(session: &[f64], item_head: &HeadParams<'_>, k: usize) -> Result<Vec<(usize, f64)>> {
    Ok(top_k(&head_forward(session, item_head)?, k, &[]))
}

/// The five named model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "TRec_id")]
    TRecId,
    #[serde(rename = "MuTRec_id")]
    MuTRecId,
    #[serde(rename = "TRec_title")]
    TRecTitle,
    MeTRec,
    M2TRec,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TRecId,
        Variant::MuTRecId,
        Variant::TRecTitle,
        Variant::MeTRec,
        Variant::M2TRec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TRecId => "TRec_id",
            Variant::MuTRecId => "MuTRec_id",
            Variant::TRecTitle => "TRec_title",
            Variant::MeTRec => "MeTRec",
            Variant::M2TRec => "M2TRec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Variant(format!("unknown variant `{s}`")))
    }

    pub fn config(self, id_embedding_dim: usize) -> VariantConfig {
        let (use_metadata, multi_task, title_only) = match self {
            Variant::TRecId => (false, false, false),
            Variant::MuTRecId => (false, true, false),
            Variant::TRecTitle => (true, false, true),
            Variant::MeTRec => (true, false, false),
            Variant::M2TRec => (true, true, false),
        };
        VariantConfig {
            use_metadata,
            use_item_id_embedding: !use_metadata,
            multi_task,
            title_only,
            id_embedding_dim,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub use_metadata: bool,
    pub use_item_id_embedding: bool,
    pub multi_task: bool,
    /// Restrict metadata to the title attribute.
    pub title_only: bool,
    pub id_embedding_dim: usize,
}

impl VariantConfig {
    pub fn variant(&self) -> Result<Variant> {
        match (self.use_metadata, self.use_item_id_embedding, self.multi_task, self.title_only) {
            (true, true, ..) => Err(Error::Variant(
                "item-ID embeddings and metadata inputs are mutually exclusive".into(),
            )),
            (false, false, ..) => Err(Error::Variant("variant has no input features".into())),
            (false, true, _, true) => Err(Error::Variant("title_only requires metadata inputs".into())),
            (false, true, false, false) => Ok(Variant::TRecId),
            (false, true, true, false) => Ok(Variant::MuTRecId),
            (true, false, false, true) => Ok(Variant::TRecTitle),
            (true, false, true, true) => Err(Error::Variant("no named multi-task title-only variant".into())),
            (true, false, false, false) => Ok(Variant::MeTRec),
            (true, false, true, false) => Ok(Variant::M2TRec),
        }
    }
}

/// Requested task: name (`item` or a catalog attribute) and loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub name: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl TaskRequest {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputPlan {
    /// Embed these catalog attributes, in schema order.
    Metadata(Vec<String>),
    /// A learned per-item embedding of this width is the only input.
    ItemId { dim: usize },
}

/// What a variant assembles: its inputs and its prediction tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantPlan {
    pub variant: Variant,
    pub inputs: InputPlan,
    pub tasks: Vec<TaskRequest>,
}

/// Resolve a variant against the attribute schema and requested tasks.
/// Single-task variants keep only the item task.
pub fn build_variant(
    config: &VariantConfig,
    schema: &[String],
    tasks: &[TaskRequest],
    title_attribute: &str,
) -> Result<VariantPlan> {
    let variant = config.variant()?;
    if !tasks.iter().any(|t| t.name == ITEM_TASK) {
        return Err(Error::Config("the item task is required".into()));
    }
    for t in tasks {
        if t.name != ITEM_TASK && !schema.contains(&t.name) {
            return Err(Error::Config(format!("task `{}` is not a catalog attribute", t.name)));
        }
        if !(t.weight.is_finite() && t.weight >= 0.0) {
            return Err(Error::Config(format!("task `{}` has invalid weight {}", t.name, t.weight)));
        }
    }
    let inputs = if config.use_item_id_embedding {
        if config.id_embedding_dim == 0 {
            return Err(Error::Config("id_embedding_dim must be positive".into()));
        }
        InputPlan::ItemId {
            dim: config.id_embedding_dim,
        }
    } else if config.title_only {
        if !schema.iter().any(|a| a == title_attribute) {
            return Err(Error::Config(format!("title attribute `{title_attribute}` not in schema")));
        }
        InputPlan::Metadata(vec![title_attribute.to_string()])
    } else {
        InputPlan::Metadata(schema.to_vec())
    };
    let tasks = tasks
        .iter()
        .filter(|t| config.multi_task || t.name == ITEM_TASK)
        .cloned()
        .collect();
    Ok(VariantPlan { variant, inputs, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_head_is_uniform() {
        let w = vec![0.0; 3 * 4];
        let b = vec![0.0; 4];
        let p = head_forward(&[0.3, -1.0, 2.0], &HeadParams { weights: &w, bias: &b }).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let w = vec![0.0; 2];
        let b = vec![1000.0, 0.0];
        let p = head_forward(&[1.0], &HeadParams { weights: &w, bias: &b }).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300 && p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_dimension_mismatch() {
        let w = vec![0.0; 6];
        let b = vec![0.0; 3];
        assert!(head_forward(&[1.0], &HeadParams { weights: &w, bias: &b }).is_err());
    }

    #[test]
    fn loss_values() {
        let u = [0.25; 4];
        for t in 0..4 {
            assert!((task_loss(&u, t).unwrap() - 4f64.ln()).abs() < 1e-9);
        }
        assert!(task_loss(&[1.0, 0.0], 0).unwrap().abs() < 1e-11);
        assert!(task_loss(&u, 4).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let m = |xs: &[(&str, f64)]| xs.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>();
        let losses = m(&[("item", 2.0), ("L1", 0.5)]);
        assert_eq!(total_loss(&losses, &m(&[("item", 1.0), ("L1", 1.0)])).unwrap(), 2.5);
        assert_eq!(total_loss(&losses, &m(&[("item", 1.0), ("L1", 0.0)])).unwrap(), 2.0);
        assert_eq!(total_loss(&m(&[("item", 2.0)]), &m(&[("item", 1.0)])).unwrap(), 2.0);
        assert!(total_loss(&losses, &m(&[("item", 1.0), ("L2", 1.0)])).is_err());
    }

    #[test]
    fn top_k_ordering() {
        assert_eq!(top_k(&[0.5, 0.3, 0.2], 2, &[]), vec![(0, 0.5), (1, 0.3)]);
        let u = [0.25; 4];
        let r = top_k(&u, 2, &[]);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(top_k(&u, 10, &[]).len(), 4);
        assert_eq!(top_k(&u, 10, &[3]).len(), 3);
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_full_sort(probs in prop::collection::vec(0u8..6, 1..40), k in 1usize..50) {
            let probs: Vec<f64> = probs.into_iter().map(|v| v as f64 / 10.0).collect();
            let mut all: Vec<usize> = (0..probs.len()).collect();
            all.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let want: Vec<usize> = all.into_iter().take(k).collect();
            let got: Vec<usize> = top_k(&probs, k, &[]).into_iter().map(|x| x.0).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn softmax_matches_exp_normalize(logits in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let w = vec![0.0; logits.len()];
            let p = head_forward(&[0.0], &HeadParams { weights: &w, bias: &logits }).unwrap();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (pi, l) in p.iter().zip(&logits) {
                prop_assert!((pi - l.exp() / z).abs() < 1e-9);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn variant_flags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.config(16).variant().unwrap(), v);
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        let bad = VariantConfig {
            use_metadata: true,
            use_item_id_embedding: true,
            multi_task: true,
            title_only: false,
            id_embedding_dim: 8,
        };
        assert!(matches!(bad.variant(), Err(Error::Variant(_))));
    }

    fn thd_schema() -> Vec<String> {
        ["title", "L1", "L2", "L3", "leaf", "brand"].iter().map(|s| s.to_string()).collect()
    }

    fn thd_tasks() -> Vec<TaskRequest> {
        ["item", "L1", "L2", "L3", "leaf"].iter().map(|s| TaskRequest::new(s)).collect()
    }

    #[test]
    fn head_counts_per_variant() {
        let plan = build_variant(&Variant::M2TRec.config(8), &thd_schema(), &thd_tasks(), "title").unwrap();
        assert_eq!(plan.tasks.len(), 5);
        let plan = build_variant(&Variant::MeTRec.config(8), &thd_schema(), &thd_tasks(), "title").unwrap();
        assert_eq!(plan.tasks.len(), 1);
        assert_eq!(plan.inputs, InputPlan::Metadata(thd_schema()));
        let plan = build_variant(&Variant::TRecTitle.config(8), &thd_schema(), &thd_tasks(), "title").unwrap();
        assert_eq!(plan.inputs, InputPlan::Metadata(vec!["title".into()]));
        let plan = build_variant(&Variant::MuTRecId.config(8), &thd_schema(), &thd_tasks(), "title").unwrap();
        assert_eq!(plan.inputs, InputPlan::ItemId { dim: 8 });
        assert_eq!(plan.tasks.len(), 5);
    }

    #[test]
    fn label_map_other_is_last() {
        let m = LabelMap::from_observed(["b", "a", "b"]);
        assert_eq!(m.labels(), &["a", "b", OTHER_LABEL]);
        assert_eq!(m.index("zzz"), 2);
        assert_eq!(m.get("zzz"), None);
        let json = serde_json::to_string(&m).unwrap();
        let back: LabelMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
