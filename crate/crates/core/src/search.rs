//! Scoped substring search, the read view and linear import/export.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DocError;
use crate::graph::{Document, Result};
use crate::ids::NodeId;

/// Which nodes a search looks at. `Both` is the union of the subtree and
/// the ancestry of the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "node", rename_all = "lowercase")]
pub enum SearchScope {
    #[default]
    All,
    Subtree(NodeId),
    Ancestry(NodeId),
    Both(NodeId),
}

impl fmt::Display for SearchScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchScope::All => f.write_str("all"),
            SearchScope::Subtree(n) => write!(f, "subtree:{n}"),
            SearchScope::Ancestry(n) => write!(f, "ancestry:{n}"),
            SearchScope::Both(n) => write!(f, "both:{n}"),
        }
    }
}

impl FromStr for SearchScope {
    type Err = String;

    /// `all`, `subtree:ID`, `ancestry:ID` or `both:ID`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(SearchScope::All);
        }
        let (kind, id) = s.split_once(':').ok_or_else(|| format!("unknown scope {s:?}"))?;
        let id: NodeId = id.parse().map_err(|e| format!("{e}"))?;
        match kind {
            "subtree" => Ok(SearchScope::Subtree(id)),
            "ancestry" => Ok(SearchScope::Ancestry(id)),
            "both" => Ok(SearchScope::Both(id)),
            _ => Err(format!("unknown scope {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub node: NodeId,
    /// Codepoint offsets into the node text, end exclusive.
    pub start: usize,
    pub end: usize,
    pub snippet: String,
}

const SNIPPET_CONTEXT: usize = 24;

/// Lowercase a character when that yields exactly one character, so offsets
/// in the folded text line up with the original.
pub fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

fn snippet(chars: &[char], start: usize, end: usize) -> String {
    let from = start.saturating_sub(SNIPPET_CONTEXT);
    let to = (end + SNIPPET_CONTEXT).min(chars.len());
    let mut s = String::new();
    if from > 0 {
        s.push('…');
    }
    s.extend(&chars[from..to]);
    if to < chars.len() {
        s.push('…');
    }
    s
}

/// Every (possibly overlapping) occurrence of `needle` in `hay`, as codepoint
/// offsets.
pub fn find_all(hay: &[char], needle: &[char]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    hay.windows(needle.len()).enumerate().filter(|(_, w)| *w == needle).map(|(i, _)| i).collect()
}

impl Document {
    /// Texts along the ancestry of `node`, concatenated as-is.
    pub fn read_view(&self, node: NodeId) -> Result<String> {
        Ok(self.ancestry(node)?.iter().map(|id| self.nodes[id].text.as_str()).collect())
    }

    /// Node set of a scope, in no particular order.
    pub fn scope_nodes(&self, scope: SearchScope) -> Result<HashSet<NodeId>> {
        Ok(match scope {
            SearchScope::All => self.nodes.keys().copied().collect(),
            SearchScope::Subtree(n) => self.subtree(n, None)?.into_iter().collect(),
            SearchScope::Ancestry(n) => self.ancestry(n)?.into_iter().collect(),
            SearchScope::Both(n) => {
                let mut set: HashSet<NodeId> = self.subtree(n, None)?.into_iter().collect();
                set.extend(self.ancestry(n)?);
                set
            }
        })
    }

    /// All occurrences of `query` in the scope, ordered by breadth-first
    /// position in the active tree (depth, then sibling order) and offset.
    pub fn search(&self, query: &str, scope: SearchScope, case_sensitive: bool) -> Result<Vec<Match>> {
        if query.is_empty() {
            return Err(DocError::Invalid("search query must not be empty".into()));
        }
        let fold = |s: &str| -> Vec<char> {
            if case_sensitive {
                s.chars().collect()
            } else {
                s.chars().map(fold_char).collect()
            }
        };
        let needle = fold(query);
        let members = self.scope_nodes(scope)?;
        let mut out = Vec::new();
        for id in self.active_tree_order() {
            if !members.contains(&id) {
                continue;
            }
            let text = &self.nodes[&id].text;
            let hay = fold(text);
            let starts = find_all(&hay, &needle);
            if starts.is_empty() {
                continue;
            }
            let original: Vec<char> = text.chars().collect();
            for start in starts {
                let end = start + needle.len();
                out.push(Match { node: id, start, end, snippet: snippet(&original, start, end) });
            }
        }
        Ok(out)
    }

    /// The read view of `node`, with a `## {title}` line before the text of
    /// every chapter root on the way when `include_chapters` is set.
    pub fn export_linear(&self, node: NodeId, include_chapters: bool) -> Result<String> {
        let mut out = String::new();
        for id in self.ancestry(node)? {
            if include_chapters {
                if let Some(c) = self.annotations.chapter_at(id) {
                    if !out.is_empty() && !out.ends_with('\n') {
                        out.push('\n');
                    }
                    out.push_str(&format!("## {}\n", c.title));
                }
            }
            out.push_str(&self.nodes[&id].text);
        }
        Ok(out)
    }

    /// Build a document from linear text. Every `## title` line starts a new
    /// node carrying a chapter of that title; the other lines form the node
    /// texts. Returns the document and its deepest node.
    pub fn import_linear(text: &str) -> (Document, NodeId) {
        let mut sections: Vec<(Option<String>, String)> = vec![(None, String::new())];
        for line in text.split_inclusive('\n') {
            let bare = line.strip_suffix('\n').unwrap_or(line);
            match bare.strip_prefix("## ") {
                Some(title) if line.ends_with('\n') => sections.push((Some(title.to_owned()), String::new())),
                _ => sections.last_mut().expect("non-empty").1.push_str(line),
            }
        }
        let mut doc = Document::new(std::mem::take(&mut sections[0].1));
        let mut tip = doc.root();
        for (title, body) in sections.into_iter().skip(1) {
            let title = title.expect("later sections have titles");
            if body.is_empty() {
                // an empty chapter cannot be a node; keep its heading as text
                let heading = format!("## {title}\n");
                tip = doc.create_child(tip, heading).expect("tip exists");
                continue;
            }
            tip = doc.create_child(tip, body).expect("tip exists");
            doc.create_chapter(tip, title).expect("fresh node");
        }
        (doc, tip)
    }

    /// Map from node to its breadth-first index in the active tree.
    pub fn tree_positions(&self) -> HashMap<NodeId, usize> {
        self.active_tree_order().into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    }
}
