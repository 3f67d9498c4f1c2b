//! Byte-pair-encoding subword tokenizer, one per textual attribute.
//!
//! Text is lowercased and split on whitespace. Each word starts as a sequence
//! of characters and merges apply within words only. Ids `0` and `1` are the
//! reserved `MISSING` and `UNK` tokens; neither ever takes part in a merge.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MISSING_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const MISSING_TOKEN: &str = "<missing>";
const UNK_TOKEN: &str = "<unk>";
const NUM_SPECIALS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub missing: String,
    pub unk: String,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            missing: MISSING_TOKEN.into(),
            unk: UNK_TOKEN.into(),
        }
    }
}

/// On-disk form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpeFile {
    pub alphabet: Vec<String>,
    pub merges: Vec<(String, String)>,
    pub specials: Specials,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BpeFile", into = "BpeFile")]
pub struct BpeModel {
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    specials: Specials,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
}

impl From<BpeModel> for BpeFile {
    fn from(m: BpeModel) -> Self {
        BpeFile {
            alphabet: m.alphabet,
            merges: m.merges,
            specials: m.specials,
        }
    }
}

impl TryFrom<BpeFile> for BpeModel {
    type Error = Error;

    fn try_from(f: BpeFile) -> Result<Self> {
        for sym in &f.alphabet {
            if sym.chars().count() != 1 {
                return Err(Error::Tokenizer(format!(
                    "alphabet symbol `{sym}` is not a single character"
                )));
            }
        }
        let mut model = BpeModel {
            alphabet: Vec::new(),
            merges: Vec::new(),
            specials: f.specials,
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
            merge_rank: HashMap::new(),
        };
        model.id_to_token.push(model.specials.missing.clone());
        model.id_to_token.push(model.specials.unk.clone());
        for sym in f.alphabet {
            model.push_token(sym.clone());
            model.alphabet.push(sym);
        }
        for (l, r) in f.merges {
            if !model.token_to_id.contains_key(&l) || !model.token_to_id.contains_key(&r) {
                return Err(Error::Tokenizer(format!(
                    "merge ({l}, {r}) uses a token not produced earlier"
                )));
            }
            model.push_merge(l, r);
        }
        Ok(model)
    }
}

impl BpeModel {
    fn push_token(&mut self, token: String) {
        if !self.token_to_id.contains_key(&token) {
            self.token_to_id
                .insert(token.clone(), self.id_to_token.len() as u32);
            self.id_to_token.push(token);
        }
    }

    fn push_merge(&mut self, l: String, r: String) {
        let merged = format!("{l}{r}");
        self.merge_rank
            .insert((l.clone(), r.clone()), self.merges.len());
        self.merges.push((l, r));
        self.push_token(merged);
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Number of token ids, specials included.
    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Token ids for `text`; empty or all-whitespace text yields `[MISSING_ID]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let out: Vec<u32> = self.encode_words(text).into_iter().flatten().collect();
        if out.is_empty() {
            vec![MISSING_ID]
        } else {
            out
        }
    }

    /// Token ids grouped by whitespace-separated word.
    pub fn encode_words(&self, text: &str) -> Vec<Vec<u32>> {
        let lower = text.to_lowercase();
        lower.split_whitespace().map(|w| self.encode_word(w)).collect()
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        // `None` marks an out-of-alphabet character, which never merges.
        let mut symbols: Vec<Option<String>> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                self.token_to_id.contains_key(&s).then_some(s)
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let (Some(l), Some(r)) = (&symbols[i], &symbols[i + 1]) {
                    if let Some(&rank) = self.merge_rank.get(&(l.clone(), r.clone())) {
                        if best.is_none_or(|(b, _)| rank < b) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && symbols[i].as_deref() == Some(l.as_str())
                    && symbols[i + 1].as_deref() == Some(r.as_str())
                {
                    next.push(Some(format!("{l}{r}")));
                    i += 2;
                } else {
                    next.push(symbols[i].take());
                    i += 1;
                }
            }
            symbols = next;
        }
        symbols
            .into_iter()
            .map(|s| match s {
                Some(tok) => self.token_to_id[&tok],
                None => UNK_ID,
            })
            .collect()
    }

    /// Concatenate token strings. Word boundaries are not recoverable from a
    /// flat id list; use [`BpeModel::decode_words`] to restore them.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.decode_one(id)).collect()
    }

    pub fn decode_words(&self, words: &[Vec<u32>]) -> String {
        words
            .iter()
            .map(|w| self.decode(w))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn decode_one(&self, id: u32) -> &str {
        match id {
            MISSING_ID => "",
            UNK_ID => UNK_TOKEN,
            _ => self.token(id).unwrap_or(UNK_TOKEN),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tokenizer serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Train a BPE model. `vocab_size` counts every id including the two specials.
/// Merging stops at `vocab_size` or when no adjacent pair occurs at least twice.
/// Equal-frequency pairs are broken by the lexicographically smallest
/// `(left, right)`.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for w in line.as_ref().to_lowercase().split_whitespace() {
            *word_freq.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    if lines == 0 || word_freq.is_empty() {
        return Err(Error::Tokenizer("empty corpus".into()));
    }
    let alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    if vocab_size <= alphabet.len() + NUM_SPECIALS {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} must exceed alphabet ({}) plus specials ({NUM_SPECIALS})",
            alphabet.len()
        )));
    }
    let mut model = BpeModel::try_from(BpeFile {
        alphabet: alphabet.iter().map(|c| c.to_string()).collect(),
        merges: Vec::new(),
        specials: Specials::default(),
    })?;

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), f))
        .collect();

    while model.vocab_size() < vocab_size {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for p in syms.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_insert(0) += f;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    next.push(merged.clone());
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = next;
        }
        model.push_merge(l, r);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Most frequent adjacent pair by direct enumeration of every word.
    fn brute_force_best_pair(corpus: &[&str]) -> (String, String) {
        let mut counts: Vec<((String, String), u64)> = Vec::new();
        for line in corpus {
            for word in line.split_whitespace() {
                let chars: Vec<char> = word.chars().collect();
                for i in 0..chars.len().saturating_sub(1) {
                    let key = (chars[i].to_string(), chars[i + 1].to_string());
                    match counts.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((key, 1)),
                    }
                }
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counts[0].0.clone()
    }

    #[test]
    fn first_merge_matches_pair_count() {
        let corpus = ["abab", "abab"];
        // alphabet {a, b} + 2 specials, one slot for a merge
        let model = train_bpe(corpus, 2 + 2 + 1).unwrap();
        assert_eq!(model.merges().len(), 1);
        assert_eq!(model.merges()[0], brute_force_best_pair(&corpus));
        assert_eq!(model.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn no_merge_without_repeated_pair() {
        let model = train_bpe(["x"], 100).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_size(), 3);
        assert!(train_bpe(["xy"], 4).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(train_bpe(empty, 10), Err(Error::Tokenizer(_))));
    }

    #[test]
    fn deterministic_training() {
        let corpus = ["power drill set", "drill bits", "cordless drill", "paint roller set"];
        let a = train_bpe(corpus, 40).unwrap();
        let b = train_bpe(corpus, 40).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn encode_applies_merge() {
        let model = train_bpe(["abab", "abab"], 5).unwrap();
        let ab = model.id("ab").unwrap();
        assert_eq!(model.encode("abab"), vec![ab, ab]);
        assert_eq!(model.encode("ABAB"), vec![ab, ab]);
    }

    #[test]
    fn empty_text_is_missing() {
        let model = train_bpe(["abab", "abab"], 5).unwrap();
        assert_eq!(model.encode(""), vec![MISSING_ID]);
        assert_eq!(model.encode("   "), vec![MISSING_ID]);
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let model = train_bpe(["abab", "abab"], 5).unwrap();
        let ab = model.id("ab").unwrap();
        assert_eq!(model.encode("abzab"), vec![ab, UNK_ID, ab]);
    }

    #[test]
    fn json_round_trip() {
        let model = train_bpe(["hammer drill", "drill press", "hammer"], 30).unwrap();
        let json = model.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.get("alphabet").is_some() && v.get("merges").is_some() && v.get("specials").is_some());
        let back: BpeModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.encode("hammer drill"), model.encode("hammer drill"));
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-e]{1,6}( [a-e]{1,6}){0,3}", 1..12)
    }

    proptest! {
        #[test]
        fn encode_properties(corpus in corpus_strategy(), vocab in 8usize..60, pick in 0usize..12) {
            let model = match train_bpe(&corpus, vocab) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            prop_assert!(model.vocab_size() <= vocab);
            let s = &corpus[pick % corpus.len()];
            let ids = model.encode(s);
            prop_assert!(ids.iter().all(|&i| (i as usize) < model.vocab_size()));
            let chars = s.chars().filter(|c| !c.is_whitespace()).count();
            prop_assert!(ids.len() <= chars.max(1));
            prop_assert_eq!(model.encode(s), ids.clone());
            let normalized: String = s.split_whitespace().collect();
            prop_assert_eq!(model.decode(&ids), normalized);
            let words = s.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(model.decode_words(&model.encode_words(s)), words);
        }
    }
}
