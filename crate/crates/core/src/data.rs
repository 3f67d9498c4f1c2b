//! Catalog and session ingestion, temporal splitting, next-item example
//! generation and tail-item bookkeeping.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AttributeKind, FeatureSchema};

/// Reserved task name for next-item prediction. Every other task name is the
/// catalog attribute it predicts.
pub const ITEM_TASK: &str = "item";

/// Label used for a category task when the target item has no value.
pub const MISSING_LABEL: &str = "<missing>";

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Missing,
    Text(String),
    Number(f64),
}

impl AttrValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, AttrValue::Missing)
    }

    /// Label form used by category tasks and the category baselines.
    pub fn label(&self) -> String {
        match self {
            AttrValue::Missing => MISSING_LABEL.to_string(),
            AttrValue::Text(s) => s.clone(),
            AttrValue::Number(v) => v.to_string(),
        }
    }
}

/// Attribute values of one item, in schema order. Carries no item id.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub values: Vec<AttrValue>,
}

impl AttributeRecord {
    pub fn missing(width: usize) -> Self {
        Self {
            values: vec![AttrValue::Missing; width],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ItemCatalog {
    schema: Vec<(String, AttributeKind)>,
    ids: Vec<String>,
    records: Vec<AttributeRecord>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new(schema: Vec<(String, AttributeKind)>) -> Self {
        Self {
            schema,
            ids: Vec::new(),
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, record: AttributeRecord) -> Result<()> {
        let id = id.into();
        if record.values.len() != self.schema.len() {
            return Err(Error::dim(
                format!("attributes of item {id}"),
                self.schema.len(),
                record.values.len(),
            ));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateItem(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.records.push(record);
        Ok(())
    }

    pub fn schema(&self) -> &[(String, AttributeKind)] {
        &self.schema
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, id: &str) -> Option<&AttributeRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Value of `attribute` for `id`; `None` if the item or attribute is unknown.
    pub fn value(&self, id: &str, attribute: &str) -> Option<&AttrValue> {
        let a = self.attribute_index(attribute)?;
        self.get(id).map(|r| &r.values[a])
    }

    /// Item ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AttributeRecord)> {
        self.ids.iter().map(String::as_str).zip(&self.records)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Record used for items the catalog does not know: every attribute missing.
    pub fn missing_record(&self) -> AttributeRecord {
        AttributeRecord::missing(self.schema.len())
    }

    /// Record for `id`, falling back to all-missing for unknown items.
    pub fn record_or_missing(&self, id: &str) -> AttributeRecord {
        self.get(id).cloned().unwrap_or_else(|| self.missing_record())
    }

    /// Serialize as the tab-separated catalog format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("item_id");
        for (name, _) in &self.schema {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for (id, rec) in self.iter() {
            out.push_str(id);
            for v in &rec.values {
                out.push('\t');
                match v {
                    AttrValue::Missing => {}
                    AttrValue::Text(s) => out.push_str(s),
                    AttrValue::Number(x) => out.push_str(&x.to_string()),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Load a UTF-8 TSV catalog: header row, `item_id` first, one column per
/// attribute. Columns not named in `schema` are ignored; empty cells are missing.
pub fn load_catalog(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<ItemCatalog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&text, schema, path)
}

pub fn parse_catalog(text: &str, schema: &FeatureSchema, path: &Path) -> Result<ItemCatalog> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.trim_end_matches('\r').split('\t').collect(),
        None => return Err(parse_err(1, "missing header row".into())),
    };
    if header.first().map(|h| h.trim()) != Some("item_id") {
        return Err(parse_err(1, "first column must be `item_id`".into()));
    }
    let mut columns = Vec::with_capacity(schema.attributes.len());
    for attr in &schema.attributes {
        let col = header
            .iter()
            .position(|h| h.trim() == attr.name)
            .ok_or_else(|| Error::MissingColumn(attr.name.clone()))?;
        columns.push((col, attr.kind));
    }
    let mut catalog = ItemCatalog::new(
        schema
            .attributes
            .iter()
            .map(|a| (a.name.clone(), a.kind))
            .collect(),
    );
    for (i, raw) in lines {
        let line_no = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split('\t').collect();
        if cells.len() != header.len() {
            return Err(parse_err(
                line_no,
                format!("expected {} columns, found {}", header.len(), cells.len()),
            ));
        }
        let id = cells[0].trim();
        if id.is_empty() {
            return Err(parse_err(line_no, "empty item_id".into()));
        }
        let mut values = Vec::with_capacity(columns.len());
        for &(col, kind) in &columns {
            let cell = cells[col].trim();
            let value = if cell.is_empty() {
                AttrValue::Missing
            } else if kind == AttributeKind::Numerical {
                let v: f64 = cell.parse().map_err(|_| {
                    parse_err(line_no, format!("`{}` is not a number", cell))
                })?;
                AttrValue::Number(v)
            } else {
                AttrValue::Text(cell.to_string())
            };
            values.push(value);
        }
        catalog.insert(id, AttributeRecord { values })?;
    }
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(rename = "items")]
    pub events: Vec<String>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of events whose item the catalog does not know.
    pub fn unknown_items(&self, catalog: &ItemCatalog) -> usize {
        self.events.iter().filter(|e| !catalog.contains(e)).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedSessions {
    pub sessions: Vec<Session>,
    pub dropped: usize,
}

/// Load JSON-lines sessions, dropping those shorter than `min_length`.
pub fn load_sessions(path: impl AsRef<Path>, min_length: usize) -> Result<LoadedSessions> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sessions(&text, min_length, path)
}

pub fn parse_sessions(text: &str, min_length: usize, path: &Path) -> Result<LoadedSessions> {
    let mut out = LoadedSessions::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let session: Session = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if session.len() < min_length {
            out.dropped += 1;
        } else {
            out.sessions.push(session);
        }
    }
    Ok(out)
}

pub fn sessions_to_jsonl(sessions: &[Session]) -> String {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s).expect("session serializes"));
        out.push('\n');
    }
    out
}

/// Sessions starting before `boundary` train; the rest test.
pub fn temporal_split(sessions: Vec<Session>, boundary: i64) -> (Vec<Session>, Vec<Session>) {
    sessions.into_iter().partition(|s| s.timestamp < boundary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub session_id: String,
    pub prefix: Vec<String>,
    /// Task name → label. The item task label is the target item id.
    pub targets: BTreeMap<String, String>,
    /// Items after the prefix, target first. Used for multi-target recall.
    pub following: Vec<String>,
}

impl TrainingExample {
    pub fn target_item(&self) -> &str {
        &self.following[0]
    }
}

#[derive(Debug, Clone, Default)]
pub struct GeneratedExamples {
    pub examples: Vec<TrainingExample>,
    /// Examples whose target item was absent from the catalog; these carry
    /// only the item-task label.
    pub unresolved_targets: usize,
}

/// Break a session of length `n` into its `n − 1` (prefix, next item) examples.
pub fn generate_examples(
    session: &Session,
    catalog: &ItemCatalog,
    tasks: &[String],
) -> Result<GeneratedExamples> {
    let n = session.events.len();
    if n < 2 {
        return Err(Error::Empty(format!(
            "session {} has {} events, need at least 2",
            session.session_id, n
        )));
    }
    let mut out = GeneratedExamples::default();
    for j in 1..n {
        let target = &session.events[j];
        let mut targets = BTreeMap::new();
        let record = catalog.get(target);
        if record.is_none() {
            out.unresolved_targets += 1;
        }
        for task in tasks {
            if task == ITEM_TASK {
                targets.insert(task.clone(), target.clone());
            } else if let Some(rec) = record {
                let label = match catalog.attribute_index(task) {
                    Some(a) => rec.values[a].label(),
                    None => MISSING_LABEL.to_string(),
                };
                targets.insert(task.clone(), label);
            }
        }
        out.examples.push(TrainingExample {
            session_id: session.session_id.clone(),
            prefix: session.events[..j].to_vec(),
            targets,
            following: session.events[j..].to_vec(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFrequencyIndex {
    pub counts: BTreeMap<String, u64>,
    pub tail_threshold: u64,
}

impl ItemFrequencyIndex {
    pub fn count(&self, item: &str) -> u64 {
        self.counts.get(item).copied().unwrap_or(0)
    }

    pub fn is_tail(&self, item: &str) -> bool {
        self.count(item) < self.tail_threshold
    }

    pub fn with_threshold(&self, threshold: u64) -> Self {
        Self {
            counts: self.counts.clone(),
            tail_threshold: threshold,
        }
    }
}

/// Count every item occurrence (prefix items and targets) in `examples`.
pub fn build_frequency_index(
    examples: &[TrainingExample],
    threshold: u64,
) -> Result<ItemFrequencyIndex> {
    if threshold < 1 {
        return Err(Error::Config("tail threshold must be at least 1".into()));
    }
    let mut counts = BTreeMap::new();
    for ex in examples {
        for item in ex.prefix.iter().chain(std::iter::once(&ex.following[0])) {
            *counts.entry(item.clone()).or_insert(0) += 1;
        }
    }
    Ok(ItemFrequencyIndex {
        counts,
        tail_threshold: threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseMode {
    /// The target item is a tail item.
    #[default]
    Target,
    /// Any item in the prefix or the target is a tail item.
    AnyItem,
}

pub fn is_sparse_session(
    example: &TrainingExample,
    index: &ItemFrequencyIndex,
    mode: SparseMode,
) -> bool {
    match mode {
        SparseMode::Target => index.is_tail(example.target_item()),
        SparseMode::AnyItem => {
            index.is_tail(example.target_item()) || example.prefix.iter().any(|i| index.is_tail(i))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AttributeSpec;

    fn schema(names: &[&str]) -> FeatureSchema {
        FeatureSchema {
            attributes: names.iter().map(|n| AttributeSpec::textual(n)).collect(),
            standardize_numerical: false,
        }
    }

    fn session(id: &str, ts: i64, items: &[&str]) -> Session {
        Session {
            session_id: id.into(),
            timestamp: ts,
            events: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn catalog_preserves_schema_order() {
        let text = "item_id\ttitle\tcategory\na\tRed hammer\ttools\nb\tBlue paint\tpaint\nc\tNails\ttools\n";
        let cat = parse_catalog(text, &schema(&["title", "category"]), Path::new("c.tsv")).unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat.schema()[0].0, "title");
        assert_eq!(cat.schema()[1].0, "category");
        assert_eq!(
            cat.value("b", "category"),
            Some(&AttrValue::Text("paint".into()))
        );
    }

    #[test]
    fn empty_cell_is_missing() {
        let text = "item_id\ttitle\tcategory\na\tRed hammer\t\n";
        let cat = parse_catalog(text, &schema(&["title", "category"]), Path::new("c.tsv")).unwrap();
        assert_eq!(cat.value("a", "category"), Some(&AttrValue::Missing));
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = "item_id\ttitle\na\tx\na\ty\n";
        let err = parse_catalog(text, &schema(&["title"]), Path::new("c.tsv")).unwrap_err();
        assert!(matches!(err, Error::DuplicateItem(ref id) if id == "a"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "item_id\ttitle\na\tx\nb\n";
        let err = parse_catalog(text, &schema(&["title"]), Path::new("c.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn header_must_cover_schema() {
        let text = "item_id\ttitle\na\tx\n";
        let err = parse_catalog(text, &schema(&["title", "brand"]), Path::new("c.tsv")).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "brand"));
    }

    #[test]
    fn sessions_drop_short_and_keep_order() {
        let text = r#"{"session_id":"s1","ts":1,"items":["a"]}
{"session_id":"s2","ts":2,"items":["a","b"]}
{"session_id":"s3","ts":3,"items":["e","d","c","b","a"]}
"#;
        let loaded = parse_sessions(text, 2, Path::new("s.jsonl")).unwrap();
        assert_eq!(loaded.sessions.len(), 2);
        assert_eq!(loaded.dropped, 1);
        assert_eq!(loaded.sessions[1].events, vec!["e", "d", "c", "b", "a"]);
    }

    #[test]
    fn empty_session_file() {
        let loaded = parse_sessions("", 2, Path::new("s.jsonl")).unwrap();
        assert!(loaded.sessions.is_empty());
        assert_eq!(loaded.dropped, 0);
    }

    #[test]
    fn unparseable_session_line() {
        let text = "{\"session_id\":\"s1\",\"ts\":1,\"items\":[\"a\",\"b\"]}\nnot json\n";
        let err = parse_sessions(text, 2, Path::new("s.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn temporal_split_cases() {
        let ss = vec![
            session("a", 10, &["x", "y"]),
            session("b", 20, &["x", "y"]),
            session("c", 30, &["x", "y"]),
        ];
        let (tr, te) = temporal_split(ss.clone(), 25);
        assert_eq!((tr.len(), te.len()), (2, 1));
        let (tr, _) = temporal_split(ss.clone(), 0);
        assert!(tr.is_empty());
        let (_, te) = temporal_split(ss, 100);
        assert!(te.is_empty());
    }

    #[test]
    fn examples_follow_prefix_rule() {
        let cat = parse_catalog(
            "item_id\tL1\na\thome\nb\ttools\nc\t\n",
            &schema(&["L1"]),
            Path::new("c"),
        )
        .unwrap();
        let tasks = vec![ITEM_TASK.to_string(), "L1".to_string()];
        let g = generate_examples(&session("s", 0, &["a", "b", "c"]), &cat, &tasks).unwrap();
        assert_eq!(g.examples.len(), 2);
        assert_eq!(g.examples[0].prefix, vec!["a"]);
        assert_eq!(g.examples[0].targets["item"], "b");
        assert_eq!(g.examples[0].targets["L1"], "tools");
        assert_eq!(g.examples[1].prefix, vec!["a", "b"]);
        assert_eq!(g.examples[1].targets["L1"], MISSING_LABEL);
        assert_eq!(g.examples[1].following, vec!["c"]);

        let g = generate_examples(&session("s", 0, &["a", "b"]), &cat, &tasks).unwrap();
        assert_eq!(g.examples.len(), 1);
    }

    #[test]
    fn unresolved_target_keeps_item_task_only() {
        let cat = parse_catalog("item_id\tL1\na\thome\n", &schema(&["L1"]), Path::new("c")).unwrap();
        let tasks = vec![ITEM_TASK.to_string(), "L1".to_string()];
        let g = generate_examples(&session("s", 0, &["a", "zz"]), &cat, &tasks).unwrap();
        assert_eq!(g.unresolved_targets, 1);
        assert_eq!(g.examples[0].targets.len(), 1);
        assert_eq!(g.examples[0].targets["item"], "zz");
    }

    #[test]
    fn tail_threshold_boundary() {
        let mut counts = BTreeMap::new();
        counts.insert("nine".to_string(), 9);
        counts.insert("ten".to_string(), 10);
        let idx = ItemFrequencyIndex {
            counts,
            tail_threshold: 10,
        };
        assert!(idx.is_tail("nine"));
        assert!(!idx.is_tail("ten"));
        assert!(idx.is_tail("never"));
        assert_eq!(idx.count("never"), 0);
    }

    #[test]
    fn sparse_flag_follows_target() {
        let mut counts = BTreeMap::new();
        counts.insert("rare".to_string(), 3);
        counts.insert("hot".to_string(), 500);
        let idx = ItemFrequencyIndex {
            counts,
            tail_threshold: 10,
        };
        let ex = |prefix: &str, target: &str| TrainingExample {
            session_id: "s".into(),
            prefix: vec![prefix.into()],
            targets: BTreeMap::new(),
            following: vec![target.into()],
        };
        assert!(is_sparse_session(&ex("hot", "rare"), &idx, SparseMode::Target));
        assert!(!is_sparse_session(&ex("rare", "hot"), &idx, SparseMode::Target));
        assert!(is_sparse_session(&ex("rare", "hot"), &idx, SparseMode::AnyItem));
        assert!(is_sparse_session(&ex("hot", "unseen"), &idx, SparseMode::Target));
    }
}
