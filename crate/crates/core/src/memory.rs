//! Memory entries and generation-context assembly.
//!
//! Entries are indexed by a small set of normalized key terms. Retrieval
//! scores an entry by the summed inverse document frequency of its keys that
//! also occur in the recent story text.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::annotations::Scope;
use crate::error::{DocError, Violation};
use crate::graph::{DeleteReport, Document, Result};
use crate::ids::{IdCounters, MemoryId, NodeId};
use crate::provider::LanguageModel;

/// Header line that opens the memory preamble.
pub const PREAMBLE_HEADER: &str = "Background notes:";

const MAX_AUTO_KEYS: usize = 8;

const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

pub fn is_stopword(term: &str) -> bool {
    STOPWORDS.binary_search(&term).is_ok()
}

/// Lowercased alphanumeric runs of `text`, in order.
pub fn normalize_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: MemoryId,
    pub text: String,
    pub keys: BTreeSet<String>,
    pub scope: Scope,
    /// Logical creation time; larger is newer.
    pub created_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryStore {
    pub(crate) entries: Vec<MemoryEntry>,
}

impl MemoryStore {
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    fn document_frequency(&self) -> HashMap<&str, usize> {
        let mut df = HashMap::new();
        for e in &self.entries {
            for k in &e.keys {
                *df.entry(k.as_str()).or_insert(0) += 1;
            }
        }
        df
    }

    /// Retrieval weight of a key: `ln(1 + N / df)`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.entries.iter().filter(|e| e.keys.contains(term)).count();
        if df == 0 {
            return 0.0;
        }
        (1.0 + self.entries.len() as f64 / df as f64).ln()
    }

    /// Pick up to eight salient terms: stopwords and one-character terms are
    /// dropped, the rest ranked by in-text frequency times rarity among the
    /// keys already stored.
    pub fn extract_keys(&self, text: &str) -> BTreeSet<String> {
        let terms = normalize_terms(text);
        let df = self.document_frequency();
        let n = self.entries.len() as f64;
        let mut stats: Vec<(String, usize, usize)> = Vec::new(); // term, tf, first position
        for (pos, t) in terms.iter().enumerate() {
            if is_stopword(t) || t.chars().count() < 2 {
                continue;
            }
            match stats.iter_mut().find(|(s, _, _)| s == t) {
                Some(entry) => entry.1 += 1,
                None => stats.push((t.clone(), 1, pos)),
            }
        }
        let salience = |term: &str, tf: usize| {
            let d = df.get(term).copied().unwrap_or(0) as f64;
            tf as f64 * (1.0 + (n + 1.0) / (d + 1.0)).ln()
        };
        stats.sort_by(|a, b| salience(&b.0, b.1).total_cmp(&salience(&a.0, a.1)).then(a.2.cmp(&b.2)));
        let mut keys: BTreeSet<String> = stats.into_iter().take(MAX_AUTO_KEYS).map(|s| s.0).collect();
        if keys.is_empty() {
            keys = terms.into_iter().take(MAX_AUTO_KEYS).collect();
        }
        keys
    }

    pub(crate) fn retarget(&mut self, from: NodeId, to: NodeId) {
        for e in &mut self.entries {
            if e.scope == Scope::Subtree(from) {
                e.scope = Scope::Subtree(to);
            }
        }
    }

    pub(crate) fn drop_nodes(&mut self, removed: &HashSet<NodeId>, report: &mut DeleteReport) {
        self.entries.retain(|e| {
            let keep = e.scope.node().is_none_or(|n| !removed.contains(&n));
            if !keep {
                report.dropped_memory.push(e.id);
            }
            keep
        });
    }

    pub(crate) fn validate(&self, doc: &Document, ids: &IdCounters, out: &mut Vec<Violation>) {
        for e in &self.entries {
            if e.keys.is_empty() {
                out.push(Violation::global(format!("memory entry {} has no keys", e.id)));
            }
            if e.id.raw() >= ids.memory {
                out.push(Violation::global(format!("memory entry {} is above the id counter", e.id)));
            }
            if let Some(n) = e.scope.node().filter(|n| !doc.contains(*n)) {
                out.push(Violation::at(n, format!("memory entry {} is scoped to a missing node", e.id)));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredEntry<'a> {
    pub entry: &'a MemoryEntry,
    pub score: f64,
}

/// Text handed to a provider: retrieved memory followed by the story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub preamble: String,
    pub story: String,
    pub token_estimate: usize,
    /// The budget could not hold the whole text of the target node.
    pub fallback: bool,
}

impl ContextBundle {
    pub fn render(&self) -> String {
        format!("{}{}", self.preamble, self.story)
    }
}

/// Longest suffix of `text` whose token count fits `budget`.
pub fn suffix_within(text: &str, budget: usize, count: impl Fn(&str) -> usize) -> &str {
    let starts: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    // counts are non-increasing as the start moves right
    let (mut lo, mut hi) = (0, starts.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if count(&text[starts[mid]..]) <= budget {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    &text[starts[lo]..]
}

impl Document {
    pub fn memory_entries(&self) -> &[MemoryEntry] {
        self.memory.entries()
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    /// Store a memory entry. Keys are normalized; when none are given they
    /// are extracted from the text.
    pub fn save_memory(
        &mut self,
        text: impl Into<String>,
        keys: Option<Vec<String>>,
        scope: Scope,
    ) -> Result<MemoryEntry> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DocError::EmptyMemory);
        }
        if let Some(n) = scope.node() {
            self.ensure(n)?;
        }
        let supplied: BTreeSet<String> = keys.unwrap_or_default().iter().flat_map(|k| normalize_terms(k)).collect();
        let keys = if supplied.is_empty() { self.memory.extract_keys(&text) } else { supplied };
        if keys.is_empty() {
            return Err(DocError::NoKeys);
        }
        let entry = MemoryEntry { id: self.ids.memory(), text, keys, scope, created_at: self.ids.tick() };
        self.memory.entries.push(entry.clone());
        self.touch();
        Ok(entry)
    }

    pub fn remove_memory(&mut self, id: MemoryId) -> Result<MemoryEntry> {
        let pos = self.memory.entries.iter().position(|e| e.id == id).ok_or(DocError::UnknownMemory(id))?;
        self.touch();
        Ok(self.memory.entries.remove(pos))
    }

    /// Up to `k` in-scope entries sharing key terms with `context_tail`,
    /// best first. Ties go to the newer entry, then the lower id.
    pub fn retrieve(&self, context_tail: &str, k: usize, at: NodeId) -> Result<Vec<ScoredEntry<'_>>> {
        let ancestry = self.ancestry(at)?;
        let terms: HashSet<String> = normalize_terms(context_tail).into_iter().collect();
        let weights: HashMap<&str, f64> =
            self.memory.entries.iter().flat_map(|e| &e.keys).map(|k| (k.as_str(), self.memory.idf(k))).collect();
        let mut scored: Vec<ScoredEntry<'_>> = self
            .memory
            .entries
            .iter()
            .filter(|e| e.scope.visible_on(&ancestry))
            .map(|entry| {
                let score = entry.keys.iter().filter(|k| terms.contains(*k)).map(|k| weights[k.as_str()]).sum();
                ScoredEntry { entry, score }
            })
            .filter(|s| s.score > 0.0)
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(b.entry.created_at.cmp(&a.entry.created_at))
                .then(a.entry.id.cmp(&b.entry.id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Assemble the provider context for continuing `node`.
    ///
    /// 5% of `budget_tokens` is held back for estimator error. When
    /// `memory_k > 0` a quarter of the rest is reserved for the memory
    /// preamble whether or not entries fill it, so the story part only
    /// depends on the budget. The story is the node's read view truncated
    /// from the left.
    pub fn build_context(
        &self,
        node: NodeId,
        budget_tokens: usize,
        memory_k: usize,
        model: &dyn LanguageModel,
    ) -> Result<ContextBundle> {
        if budget_tokens < 16 {
            return Err(DocError::BudgetTooSmall(budget_tokens));
        }
        let effective = budget_tokens * 95 / 100;
        let reserve = if memory_k > 0 { effective / 4 } else { 0 };
        let full = self.read_view(node)?;
        let story = suffix_within(&full, effective - reserve, |s| model.count_tokens(s)).to_owned();
        let fallback = story.len() < self.node(node)?.text.len();

        let mut preamble = String::new();
        if memory_k > 0 {
            let mut lines = Vec::new();
            for scored in self.retrieve(&story, memory_k, node)? {
                let line = format!("- {}\n", scored.entry.text.split_whitespace().collect::<Vec<_>>().join(" "));
                lines.push(line);
                let candidate = format!("{PREAMBLE_HEADER}\n{}\n", lines.concat());
                if model.count_tokens(&candidate) > reserve {
                    lines.pop();
                }
            }
            if !lines.is_empty() {
                preamble = format!("{PREAMBLE_HEADER}\n{}\n", lines.concat());
            }
        }
        let token_estimate = model.count_tokens(&format!("{preamble}{story}"));
        Ok(ContextBundle { preamble, story, token_estimate, fallback })
    }

    /// [`Self::build_context`] with the document's configured budget.
    pub fn default_context(&self, node: NodeId, model: &dyn LanguageModel) -> Result<ContextBundle> {
        self.build_context(node, self.settings.context_budget_tokens, self.settings.memory_k, model)
    }
}
