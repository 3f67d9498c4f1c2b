//! Ranking metrics, slice-level evaluation reports and the two heuristic
//! category baselines.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{is_sparse_session, AttrValue, ItemCatalog, ItemFrequencyIndex, SparseMode, TrainingExample, ITEM_TASK, MISSING_LABEL};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{EncodedExample, ItemTable, Model};

pub const DEFAULT_K: usize = 20;
const EVAL_CHUNK: usize = 32;

/// Labels in descending score order, cut off at `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<L> {
    labels: Vec<L>,
    k: usize,
}

impl<L: PartialEq> RankedList<L> {
    pub fn new(labels: Vec<L>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate label at rank {}", i + 1)));
            }
        }
        Ok(Self { labels, k })
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// 1-based rank of `target` if it is within the cutoff.
    pub fn rank_of(&self, target: &L) -> Option<usize> {
        self.labels.iter().take(self.k).position(|l| l == target).map(|i| i + 1)
    }
}

pub fn hit_at_k<L: PartialEq>(ranked: &RankedList<L>, target: &L) -> f64 {
    if ranked.rank_of(target).is_some() {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_at_k<L: PartialEq>(ranked: &RankedList<L>, target: &L) -> f64 {
    ranked.rank_of(target).map_or(0.0, |r| 1.0 / r as f64)
}

/// Fraction of `targets` that appear in the top `k`.
pub fn recall_at_k<L: Ord>(ranked: &RankedList<L>, targets: &BTreeSet<L>) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("recall target set".into()));
    }
    let hits = targets.iter().filter(|t| ranked.rank_of(t).is_some()).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Mean metrics over one slice of the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub count: usize,
    pub hit_at_k: f64,
    pub mrr_at_k: f64,
    /// Item task only; absent when every example was skipped.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_at_k: Option<f64>,
    pub recall_count: usize,
    /// Examples whose whole future was outside the label space.
    pub recall_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub all: Option<SliceMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sparse: Option<SliceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub examples: usize,
    pub sparse_examples: usize,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per task and slice.
    pub fn to_table(&self) -> String {
        let k = self.k;
        let mut rows = vec![vec![
            "task".to_string(),
            "slice".into(),
            "n".into(),
            format!("HIT@{k}"),
            format!("Recall@{k}"),
            format!("MRR@{k}"),
        ]];
        for t in &self.tasks {
            for (slice, m) in [("All", &t.all), ("Sparse", &t.sparse)] {
                let mut row = vec![t.task.clone(), slice.into()];
                match m {
                    Some(m) => row.extend([
                        m.count.to_string(),
                        pct(Some(m.hit_at_k)),
                        pct(m.recall_at_k),
                        pct(Some(m.mrr_at_k)),
                    ]),
                    None => row.extend(["0".into(), "-".into(), "-".into(), "-".into()]),
                }
                rows.push(row);
            }
        }
        render(&rows)
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub parameters: usize,
    pub report: EvalReport,
}

/// Item-task metrics for every variant side by side, with model size.
pub fn grid_table(rows: &[GridRow]) -> String {
    let k = rows.first().map_or(DEFAULT_K, |r| r.report.k);
    let mut out = vec![vec![
        "variant".to_string(),
        "size".into(),
        "params".into(),
        format!("HIT@{k} All"),
        format!("HIT@{k} Sparse"),
        format!("Recall@{k} All"),
        format!("Recall@{k} Sparse"),
        format!("MRR@{k} All"),
        format!("MRR@{k} Sparse"),
    ]];
    for r in rows {
        let t = r.report.task(ITEM_TASK);
        let all = t.and_then(|t| t.all.as_ref());
        let sp = t.and_then(|t| t.sparse.as_ref());
        out.push(vec![
            r.variant.clone(),
            model_size(r.parameters),
            r.parameters.to_string(),
            pct(all.map(|m| m.hit_at_k)),
            pct(sp.map(|m| m.hit_at_k)),
            pct(all.and_then(|m| m.recall_at_k)),
            pct(sp.and_then(|m| m.recall_at_k)),
            pct(all.map(|m| m.mrr_at_k)),
            pct(sp.map(|m| m.mrr_at_k)),
        ]);
    }
    render(&out)
}

fn model_size(params: usize) -> String {
    match params {
        p if p >= 1_000_000 => format!("{:.1}M", p as f64 / 1e6),
        p if p >= 1_000 => format!("{:.1}K", p as f64 / 1e3),
        p => p.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Score {
    hit: f64,
    mrr: f64,
    recall: Option<f64>,
    recall_skipped: bool,
}

#[derive(Debug, Default, Clone)]
struct Acc {
    count: usize,
    hit: f64,
    mrr: f64,
    recall: f64,
    recall_count: usize,
    recall_skipped: usize,
}

impl Acc {
    fn add(&mut self, s: &Score) {
        self.count += 1;
        self.hit += s.hit;
        self.mrr += s.mrr;
        if let Some(r) = s.recall {
            self.recall += r;
            self.recall_count += 1;
        }
        if s.recall_skipped {
            self.recall_skipped += 1;
        }
    }

    fn finish(&self, with_recall: bool) -> Option<SliceMetrics> {
        (self.count > 0).then(|| SliceMetrics {
            count: self.count,
            hit_at_k: self.hit / self.count as f64,
            mrr_at_k: self.mrr / self.count as f64,
            recall_at_k: (with_recall && self.recall_count > 0).then(|| self.recall / self.recall_count as f64),
            recall_count: self.recall_count,
            recall_skipped: self.recall_skipped,
        })
    }
}

/// Per-task scores of one example; `None` where the example has no label.
fn score_example(model: &Model, table: &ItemTable, ex: &TrainingExample, k: usize) -> Result<Vec<Option<Score>>> {
    let prefix: Vec<u32> = ex.prefix.iter().map(|i| table.lookup(i)).collect();
    let pred = model.predict(table, &prefix)?;
    let mut out = Vec::with_capacity(model.tasks().len());
    for (t, task) in model.tasks().iter().enumerate() {
        let Some(label) = ex.targets.get(&task.name) else {
            out.push(None);
            continue;
        };
        let ranked = RankedList::new(model.rank(&pred.probs[t], t, k).into_iter().map(|(i, _)| i).collect(), k)?;
        let mut s = Score::default();
        // a target outside the label space can never be ranked
        if let Some(target) = task.labels.get(label) {
            s.hit = hit_at_k(&ranked, &target);
            s.mrr = mrr_at_k(&ranked, &target);
        }
        if task.is_item_task() {
            let future: BTreeSet<&str> = ex.following.iter().map(String::as_str).collect();
            let seen: BTreeSet<usize> = future.iter().filter_map(|f| task.labels.get(f)).collect();
            if seen.is_empty() {
                s.recall_skipped = true;
            } else {
                let hits = seen.iter().filter(|l| ranked.rank_of(l).is_some()).count();
                s.recall = Some(hits as f64 / future.len() as f64);
            }
        }
        out.push(Some(s));
    }
    Ok(out)
}

/// HIT/Recall/MRR@k per task over all examples and the sparse slice.
pub fn evaluate(
    model: &Model,
    table: &ItemTable,
    examples: &[TrainingExample],
    index: &ItemFrequencyIndex,
    sparse_mode: SparseMode,
    k: usize,
    exec: Exec,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let chunks = exec.map_chunks(examples, EVAL_CHUNK, |_, chunk| {
        chunk
            .iter()
            .map(|ex| score_example(model, table, ex, k).map(|s| (s, is_sparse_session(ex, index, sparse_mode))))
            .collect::<Result<Vec<_>>>()
    });
    let n_tasks = model.tasks().len();
    let mut all = vec![Acc::default(); n_tasks];
    let mut sparse = vec![Acc::default(); n_tasks];
    let mut sparse_examples = 0;
    for chunk in chunks {
        for (scores, is_sparse) in chunk? {
            sparse_examples += usize::from(is_sparse);
            for (t, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    all[t].add(s);
                    if is_sparse {
                        sparse[t].add(s);
                    }
                }
            }
        }
    }
    let tasks = model
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, task)| TaskReport {
            task: task.name.clone(),
            all: all[t].finish(task.is_item_task()),
            sparse: sparse[t].finish(task.is_item_task()),
        })
        .collect();
    Ok(EvalReport {
        k,
        examples: examples.len(),
        sparse_examples,
        tasks,
    })
}

/// Item-task HIT@k over pre-encoded examples (used for validation).
pub fn item_hit_rate(model: &Model, table: &ItemTable, examples: &[EncodedExample], k: usize, exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let item = model.task_index(ITEM_TASK).ok_or_else(|| Error::Config("model has no item task".into()))?;
    let other = model.tasks()[item].labels.other();
    let chunks = exec.map_chunks(examples, EVAL_CHUNK, |_, chunk| {
        let mut hits = 0usize;
        for ex in chunk {
            let p = model.predict(table, &ex.prefix)?;
            if let Some(t) = ex.targets[item].filter(|&t| t != other) {
                if model.rank(&p.probs[item], item, k).iter().any(|(i, _)| *i == t) {
                    hits += 1;
                }
            }
        }
        Ok::<_, Error>(hits)
    });
    let mut hits = 0;
    for c in chunks {
        hits += c?;
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn category_of(catalog: &ItemCatalog, item: &str, task: &str) -> Option<String> {
    catalog.value(item, task).map(|v| match v {
        AttrValue::Missing => MISSING_LABEL.to_string(),
        v => v.label(),
    })
}

/// Categories of the prefix items, most frequent first; ties go to the
/// category seen most recently. Items outside the catalog are ignored.
pub fn baseline_frequent_category(prefix: &[String], catalog: &ItemCatalog, task: &str, n: usize) -> Result<RankedList<String>> {
    if prefix.is_empty() {
        return Err(Error::Empty("session prefix".into()));
    }
    let mut stats: HashMap<String, (usize, usize)> = HashMap::new();
    for (pos, item) in prefix.iter().enumerate() {
        if let Some(c) = category_of(catalog, item, task) {
            let e = stats.entry(c).or_insert((0, 0));
            e.0 += 1;
            e.1 = pos;
        }
    }
    let mut cats: Vec<(String, (usize, usize))> = stats.into_iter().collect();
    cats.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(b.1 .1.cmp(&a.1 .1)));
    RankedList::new(cats.into_iter().take(n).map(|(c, _)| c).collect(), n.max(1))
}

/// Categories of ranked items in rank order, keeping first occurrences.
pub fn categories_in_rank_order(items: &[String], catalog: &ItemCatalog, task: &str, n: usize) -> Result<RankedList<String>> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        if let Some(c) = category_of(catalog, item, task) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    RankedList::new(out, n.max(1))
}

/// Categories of a single-task model's top-`n` predicted items.
pub fn baseline_top_predicted_category(
    prefix: &[String],
    model: &Model,
    table: &ItemTable,
    catalog: &ItemCatalog,
    task: &str,
    n: usize,
) -> Result<RankedList<String>> {
    if prefix.is_empty() {
        return Err(Error::Empty("session prefix".into()));
    }
    let item = model.task_index(ITEM_TASK).ok_or_else(|| Error::Config("model has no item task".into()))?;
    let ids: Vec<u32> = prefix.iter().map(|i| table.lookup(i)).collect();
    let p = model.predict(table, &ids)?;
    let labels = &model.tasks()[item].labels;
    let top: Vec<String> = model
        .rank(&p.probs[item], item, n)
        .into_iter()
        .map(|(i, _)| labels.label(i).to_string())
        .collect();
    categories_in_rank_order(&top, catalog, task, n)
}

/// HIT@k of both heuristic baselines on one category task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineHits {
    pub examples: usize,
    pub frequent: f64,
    pub top_predicted: f64,
}

pub fn evaluate_category_baselines(
    examples: &[TrainingExample],
    single_task: &Model,
    table: &ItemTable,
    catalog: &ItemCatalog,
    task: &str,
    k: usize,
    exec: Exec,
) -> Result<BaselineHits> {
    let chunks = exec.map_chunks(examples, EVAL_CHUNK, |_, chunk| {
        let mut acc = (0usize, 0.0, 0.0);
        for ex in chunk {
            let Some(target) = ex.targets.get(task) else { continue };
            let f = baseline_frequent_category(&ex.prefix, catalog, task, k)?;
            let p = baseline_top_predicted_category(&ex.prefix, single_task, table, catalog, task, k)?;
            acc.0 += 1;
            acc.1 += hit_at_k(&f, target);
            acc.2 += hit_at_k(&p, target);
        }
        Ok::<_, Error>(acc)
    });
    let (mut n, mut f, mut p) = (0usize, 0.0, 0.0);
    for c in chunks {
        let c = c?;
        n += c.0;
        f += c.1;
        p += c.2;
    }
    if n == 0 {
        return Err(Error::Empty(format!("examples with a `{task}` target")));
    }
    Ok(BaselineHits {
        examples: n,
        frequent: f / n as f64,
        top_predicted: p / n as f64,
    })
}
