//! The multiverse graph.
//!
//! Each node has an ordered list of parents and one *active* parent. Child
//! edges may form cycles, but the active-parent edges always form a tree
//! rooted at the document root, so every node has exactly one terminating
//! history (its ancestry).

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotations::Annotations;
use crate::error::{DocError, Violation};
use crate::ids::{ChapterId, IdCounters, MemoryId, NodeId, NoteId};
use crate::memory::MemoryStore;
use crate::provider::{GenerationParams, ProviderConfig, TokenLogprob};
use crate::tools::{self, PromptTemplate};

pub type Result<T, E = DocError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Canonical,
    Exploratory,
    Collapsed,
}

/// How a node's text was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub provider: String,
    pub params: GenerationParams,
    #[serde(default)]
    pub tokens: Vec<TokenLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) text: String,
    #[serde(default)]
    pub(crate) parents: Vec<NodeId>,
    #[serde(default)]
    pub(crate) active_parent: Option<NodeId>,
    #[serde(default)]
    pub(crate) children: Vec<NodeId>,
    #[serde(default)]
    pub(crate) flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) gen_meta: Option<GenMeta>,
    /// Fields written by newer versions of the format.
    #[serde(flatten)]
    pub(crate) extra: BTreeMap<String, Value>,
}

impl Node {
    fn new(id: NodeId, text: String, parent: Option<NodeId>) -> Self {
        Self {
            id,
            text,
            parents: parent.into_iter().collect(),
            active_parent: parent,
            children: Vec::new(),
            flags: BTreeSet::new(),
            gen_meta: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn active_parent(&self) -> Option<NodeId> {
        self.active_parent
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn flags(&self) -> &BTreeSet<Flag> {
        &self.flags
    }

    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn gen_meta(&self) -> Option<&GenMeta> {
        self.gen_meta.as_ref()
    }

    /// Equal apart from the children list.
    pub fn same_content(&self, other: &Node) -> bool {
        self.id == other.id
            && self.text == other.text
            && self.parents == other.parents
            && self.active_parent == other.active_parent
            && self.flags == other.flags
            && self.gen_meta == other.gen_meta
            && self.extra == other.extra
    }

    /// Length of the text in codepoints.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Per-document generation settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub context_budget_tokens: usize,
    pub memory_k: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self { context_budget_tokens: 2048, memory_k: 3 }
    }
}

/// The whole multiverse.
#[derive(Debug, Clone)]
pub struct Document {
    pub(crate) nodes: BTreeMap<NodeId, Node>,
    pub(crate) root: NodeId,
    pub(crate) ids: IdCounters,
    pub(crate) annotations: Annotations,
    pub(crate) memory: MemoryStore,
    pub(crate) templates: Vec<PromptTemplate>,
    pub(crate) provider: Option<ProviderConfig>,
    pub(crate) settings: Settings,
    pub(crate) saved_at: Option<String>,
    pub(crate) extra: BTreeMap<String, Value>,
    revision: u64,
    clean_revision: u64,
}

/// Structural equality: compares content, not the in-memory revision counter
/// or save timestamp.
impl PartialEq for Document {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.root == other.root
            && self.ids == other.ids
            && self.annotations == other.annotations
            && self.memory == other.memory
            && self.templates == other.templates
            && self.provider == other.provider
            && self.settings == other.settings
            && self.extra == other.extra
    }
}

/// What a [`Document::delete_subtree`] call removed or rewired.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeleteReport {
    pub removed: Vec<NodeId>,
    /// Survivors whose active parent was deleted, with their new active parent.
    pub reassigned_active: Vec<(NodeId, NodeId)>,
    pub dropped_bookmarks: Vec<String>,
    pub dropped_chapters: Vec<ChapterId>,
    pub dropped_notes: Vec<NoteId>,
    pub dropped_memory: Vec<MemoryId>,
    pub untagged: Vec<(String, NodeId)>,
}

impl Document {
    /// A document holding only a root node with `prompt` as its text. Ships
    /// with the built-in template pack.
    pub fn new(prompt: impl Into<String>) -> Self {
        let mut ids = IdCounters::default();
        let root = ids.node();
        let mut nodes = BTreeMap::new();
        nodes.insert(root, Node::new(root, prompt.into(), None));
        Self {
            nodes,
            root,
            ids,
            annotations: Annotations::default(),
            memory: MemoryStore::default(),
            templates: tools::builtin_templates(),
            provider: None,
            settings: Settings::default(),
            saved_at: None,
            extra: BTreeMap::new(),
            revision: 0,
            clean_revision: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        nodes: BTreeMap<NodeId, Node>,
        root: NodeId,
        ids: IdCounters,
        annotations: Annotations,
        memory: MemoryStore,
        templates: Vec<PromptTemplate>,
        provider: Option<ProviderConfig>,
        settings: Settings,
        saved_at: Option<String>,
        extra: BTreeMap<String, Value>,
    ) -> Self {
        Self {
            nodes,
            root,
            ids,
            annotations,
            memory,
            templates,
            provider,
            settings,
            saved_at,
            extra,
            revision: 0,
            clean_revision: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(&id).ok_or(DocError::UnknownNode(id))
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn set_settings(&mut self, settings: Settings) {
        self.settings = settings;
        self.touch();
    }

    pub fn provider_config(&self) -> Option<&ProviderConfig> {
        self.provider.as_ref()
    }

    pub fn set_provider_config(&mut self, config: Option<ProviderConfig>) {
        self.provider = config;
        self.touch();
    }

    /// Timestamp written by the last save this document was loaded from or
    /// marked with.
    pub fn saved_at(&self) -> Option<&str> {
        self.saved_at.as_deref()
    }

    /// Number of successful mutations since this value was created or loaded.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Changed since it was created, loaded or last stamped as saved.
    pub fn is_dirty(&self) -> bool {
        self.revision != self.clean_revision
    }

    /// Record a save. The timestamp only moves when the content changed
    /// since the previous one, so saving an unchanged document is
    /// byte-for-byte repeatable.
    pub fn stamp_saved(&mut self, now: impl FnOnce() -> String) {
        if self.is_dirty() || self.saved_at.is_none() {
            self.saved_at = Some(now());
        }
        self.clean_revision = self.revision;
    }

    pub(crate) fn touch(&mut self) {
        self.revision += 1;
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        self.nodes.get_mut(&id).ok_or(DocError::UnknownNode(id))
    }

    pub(crate) fn ensure(&self, id: NodeId) -> Result<()> {
        self.node(id).map(|_| ())
    }

    pub fn create_child(&mut self, parent: NodeId, text: impl Into<String>) -> Result<NodeId> {
        self.insert_child(parent, text.into(), None)
    }

    pub fn create_generated_child(&mut self, parent: NodeId, text: impl Into<String>, meta: GenMeta) -> Result<NodeId> {
        self.insert_child(parent, text.into(), Some(meta))
    }

    fn insert_child(&mut self, parent: NodeId, text: String, meta: Option<GenMeta>) -> Result<NodeId> {
        self.ensure(parent)?;
        if text.is_empty() {
            return Err(DocError::EmptyText(NodeId::from_raw(self.ids.node)));
        }
        let id = self.ids.node();
        let mut node = Node::new(id, text, Some(parent));
        node.flags.insert(Flag::Exploratory);
        node.gen_meta = meta;
        self.nodes.insert(id, node);
        self.node_mut(parent)?.children.push(id);
        self.touch();
        Ok(id)
    }

    /// Replace a node's text. Generation metadata no longer describes the
    /// text afterwards and is dropped.
    pub fn set_text(&mut self, id: NodeId, text: impl Into<String>) -> Result<()> {
        let text = text.into();
        let root = self.root;
        let node = self.node_mut(id)?;
        if text.is_empty() && id != root {
            return Err(DocError::EmptyText(id));
        }
        if node.text != text {
            node.text = text;
            node.gen_meta = None;
        }
        self.touch();
        Ok(())
    }

    /// Split `id` at a codepoint offset. The upper half keeps the id and the
    /// parents; the lower half takes the children and every annotation.
    pub fn split_node(&mut self, id: NodeId, offset: usize) -> Result<(NodeId, NodeId)> {
        let node = self.node(id)?;
        let len = node.char_len();
        if offset == 0 || offset >= len {
            return Err(DocError::OffsetOutOfRange { node: id, offset, len });
        }
        let byte = node.text.char_indices().nth(offset).map(|(i, _)| i).expect("offset < len");

        let lower_id = self.ids.node();
        let upper = self.nodes.get_mut(&id).expect("checked above");
        let lower_text = upper.text.split_off(byte);
        let children = std::mem::replace(&mut upper.children, vec![lower_id]);
        let (upper_meta, lower_meta) = split_meta(upper.gen_meta.take(), byte);
        upper.gen_meta = upper_meta;

        let mut lower = Node::new(lower_id, lower_text, Some(id));
        lower.children = children.clone();
        lower.flags = upper.flags.clone();
        lower.gen_meta = lower_meta;
        self.nodes.insert(lower_id, lower);

        for child in children {
            let child = self.nodes.get_mut(&child).expect("children exist");
            for p in child.parents.iter_mut().filter(|p| **p == id) {
                *p = lower_id;
            }
            if child.active_parent == Some(id) {
                child.active_parent = Some(lower_id);
            }
        }
        self.annotations.retarget(id, lower_id);
        self.memory.retarget(id, lower_id);
        self.touch();
        Ok((id, lower_id))
    }

    /// Fold `id` into its only parent, which must have `id` as its only child.
    pub fn merge_with_parent(&mut self, id: NodeId) -> Result<NodeId> {
        if id == self.root {
            return Err(DocError::RootOperation("merge"));
        }
        let node = self.node(id)?;
        let [parent] = node.parents[..] else {
            return Err(DocError::MultipleParents(id));
        };
        if self.node(parent)?.children != [id] {
            return Err(DocError::HasSiblings { node: id, parent });
        }
        if node.children.contains(&parent) {
            return Err(DocError::SelfParent(parent));
        }
        if self.annotations.chapter_at(id).is_some() && self.annotations.chapter_at(parent).is_some() {
            return Err(DocError::ChapterConflict { node: id, parent });
        }

        let node = self.nodes.remove(&id).expect("checked above");
        for &child in &node.children {
            let child = self.nodes.get_mut(&child).expect("children exist");
            for p in child.parents.iter_mut().filter(|p| **p == id) {
                *p = parent;
            }
            if child.active_parent == Some(id) {
                child.active_parent = Some(parent);
            }
        }
        let upper = self.nodes.get_mut(&parent).expect("checked above");
        upper.text.push_str(&node.text);
        upper.children = node.children;
        upper.gen_meta = merge_meta(upper.gen_meta.take(), node.gen_meta);
        self.annotations.retarget(id, parent);
        self.memory.retarget(id, parent);
        self.touch();
        Ok(parent)
    }

    /// Edit the parent set of `id`. `new_active` of `None` keeps the current
    /// active parent, which must then survive the edit.
    pub fn reparent(
        &mut self,
        id: NodeId,
        add: &[NodeId],
        remove: &[NodeId],
        new_active: Option<NodeId>,
    ) -> Result<()> {
        if id == self.root {
            return Err(DocError::RootOperation("reparent"));
        }
        let node = self.node(id)?;
        for &other in add.iter().chain(remove).chain(new_active.as_ref()) {
            self.ensure(other)?;
        }
        if add.contains(&id) || new_active == Some(id) {
            return Err(DocError::SelfParent(id));
        }

        let old_parents = node.parents.clone();
        let mut parents: Vec<NodeId> = old_parents.iter().copied().filter(|p| !remove.contains(p)).collect();
        for &p in add {
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        if parents.is_empty() {
            return Err(DocError::NoParents(id));
        }
        let old_active = node.active_parent.expect("non-root has an active parent");
        let active = new_active.unwrap_or(old_active);
        if !parents.contains(&active) {
            return Err(DocError::ActiveNotParent { node: id, active });
        }
        if active != old_active && self.ancestry(active)?.contains(&id) {
            return Err(DocError::ActiveCycle { node: id, active });
        }

        for p in old_parents.iter().filter(|p| !parents.contains(p)) {
            self.nodes.get_mut(p).expect("parents exist").children.retain(|c| *c != id);
        }
        for p in parents.iter().filter(|p| !old_parents.contains(p)) {
            self.nodes.get_mut(p).expect("checked above").children.push(id);
        }
        let node = self.nodes.get_mut(&id).expect("checked above");
        node.parents = parents;
        node.active_parent = Some(active);
        self.touch();
        Ok(())
    }

    /// Path from the root to `id` along active-parent links.
    pub fn ancestry(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![id];
        let mut current = self.node(id)?;
        while let Some(parent) = current.active_parent {
            if path.len() > self.nodes.len() {
                return Err(DocError::Invalid(format!("active-parent cycle through {id}")));
            }
            path.push(parent);
            current = self.node(parent)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Depth of `id` in the active-parent tree; the root has depth 0.
    pub fn depth(&self, id: NodeId) -> Result<usize> {
        Ok(self.ancestry(id)?.len() - 1)
    }

    /// Breadth-first closure over child edges, starting at (and including)
    /// `id`. Each node appears once even when child edges form cycles.
    pub fn subtree(&self, id: NodeId, max_depth: Option<usize>) -> Result<Vec<NodeId>> {
        self.ensure(id)?;
        let mut seen = HashSet::from([id]);
        let mut order = vec![id];
        let mut queue = VecDeque::from([(id, 0usize)]);
        while let Some((current, depth)) = queue.pop_front() {
            if max_depth.is_some_and(|max| depth >= max) {
                continue;
            }
            for &child in &self.nodes[&current].children {
                if seen.insert(child) {
                    order.push(child);
                    queue.push_back((child, depth + 1));
                }
            }
        }
        Ok(order)
    }

    /// Children of `id` whose active parent is `id`, in sibling order.
    pub fn active_children(&self, id: NodeId) -> Result<Vec<NodeId>> {
        Ok(self.node(id)?.children.iter().copied().filter(|c| self.nodes[c].active_parent == Some(id)).collect())
    }

    /// Breadth-first order of the active-parent tree.
    pub fn active_tree_order(&self) -> Vec<NodeId> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let id = order[i];
            order.extend(self.active_children(id).expect("ids come from the document"));
            i += 1;
        }
        order
    }

    /// Delete `id` and every node that can only be reached from the root
    /// through it. Survivors that lose their active parent are re-anchored on
    /// a surviving parent.
    pub fn delete_subtree(&mut self, id: NodeId) -> Result<DeleteReport> {
        if id == self.root {
            return Err(DocError::RootOperation("delete"));
        }
        self.ensure(id)?;

        let mut reachable = HashSet::from([self.root]);
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            for &child in &self.nodes[&order[i]].children {
                if child != id && reachable.insert(child) {
                    order.push(child);
                }
            }
            i += 1;
        }
        let removed: Vec<NodeId> = self.nodes.keys().copied().filter(|n| !reachable.contains(n)).collect();
        let removed_set: HashSet<NodeId> = removed.iter().copied().collect();
        for n in &removed {
            self.nodes.remove(n);
        }
        let mut broken = HashSet::new();
        for node in self.nodes.values_mut() {
            node.parents.retain(|p| !removed_set.contains(p));
            node.children.retain(|c| !removed_set.contains(c));
            if node.active_parent.is_some_and(|p| removed_set.contains(&p)) {
                broken.insert(node.id);
            }
        }

        let reassigned_active = self.reanchor(&order, &broken);
        let mut report = DeleteReport { removed, reassigned_active, ..Default::default() };
        self.annotations.drop_nodes(&removed_set, &mut report);
        self.memory.drop_nodes(&removed_set, &mut report);
        self.touch();
        Ok(report)
    }

    /// Repair active parents after a deletion. `order` is a breadth-first
    /// order of the survivors over child edges.
    fn reanchor(&mut self, order: &[NodeId], broken: &HashSet<NodeId>) -> Vec<(NodeId, NodeId)> {
        let mut anchored = HashSet::from([self.root]);
        let mut changes = Vec::new();
        loop {
            // propagate along current active links
            let mut grew = true;
            while grew {
                grew = false;
                for &n in order {
                    if anchored.contains(&n) {
                        continue;
                    }
                    let active = self.nodes[&n].active_parent.expect("non-root");
                    if anchored.contains(&active) {
                        anchored.insert(n);
                        grew = true;
                    }
                }
            }
            if anchored.len() == order.len() {
                return changes;
            }
            let pending = |n: &&NodeId| !anchored.contains(*n);
            let pick = order
                .iter()
                .filter(pending)
                .filter(|n| broken.contains(n))
                .find_map(|&n| self.first_anchored_parent(n, &anchored).map(|p| (n, p)))
                .or_else(|| {
                    order.iter().filter(pending).find_map(|&n| self.first_anchored_parent(n, &anchored).map(|p| (n, p)))
                })
                .expect("every survivor has a parent on some root path");
            let (n, p) = pick;
            self.nodes.get_mut(&n).expect("survivor").active_parent = Some(p);
            anchored.insert(n);
            changes.push((n, p));
        }
    }

    fn first_anchored_parent(&self, n: NodeId, anchored: &HashSet<NodeId>) -> Option<NodeId> {
        self.nodes[&n].parents.iter().copied().find(|p| anchored.contains(p))
    }

    /// Check every structural invariant. Returns all violations found.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let Some(root) = self.nodes.get(&self.root) else {
            return Err(vec![Violation::at(self.root, "root node is missing")]);
        };
        if !root.parents.is_empty() || root.active_parent.is_some() {
            out.push(Violation::at(self.root, "root must have no parents"));
        }

        for node in self.nodes.values() {
            let id = node.id;
            if id.raw() >= self.ids.node {
                out.push(Violation::at(id, "id is not below the allocation counter"));
            }
            for p in node.parents.iter().chain(&node.children) {
                if !self.nodes.contains_key(p) {
                    out.push(Violation::at(id, format!("references missing node {p}")));
                }
            }
            if has_duplicates(&node.parents) {
                out.push(Violation::at(id, "duplicate parent"));
            }
            if has_duplicates(&node.children) {
                out.push(Violation::at(id, "duplicate child"));
            }
            if node.parents.contains(&id) {
                out.push(Violation::at(id, "node is its own parent"));
            }
            if id == self.root {
                continue;
            }
            if node.text.is_empty() {
                out.push(Violation::at(id, "non-root node has empty text"));
            }
            match node.active_parent {
                None if node.parents.is_empty() => out.push(Violation::at(id, "non-root node has no parents")),
                None => out.push(Violation::at(id, "non-root node has no active parent")),
                Some(p) if !node.parents.contains(&p) => {
                    out.push(Violation::at(id, format!("active parent {p} is not a parent")))
                }
                Some(_) => {}
            }
        }
        if !out.is_empty() {
            return Err(out);
        }

        // children lists mirror parent lists
        for node in self.nodes.values() {
            for c in &node.children {
                if !self.nodes[c].parents.contains(&node.id) {
                    out.push(Violation::at(node.id, format!("child {c} does not list it as parent")));
                }
            }
            for p in &node.parents {
                if !self.nodes[p].children.contains(&node.id) {
                    out.push(Violation::at(node.id, format!("parent {p} does not list it as child")));
                }
            }
        }

        // active tree: every chain terminates at the root
        let mut anchored = HashSet::from([self.root]);
        for &start in self.nodes.keys() {
            let mut chain = Vec::new();
            let mut current = start;
            while !anchored.contains(&current) {
                if chain.len() > self.nodes.len() {
                    out.push(Violation::at(start, "active-parent chain does not reach the root"));
                    break;
                }
                chain.push(current);
                current = self.nodes[&current].active_parent.expect("checked above");
            }
            if anchored.contains(&current) {
                anchored.extend(chain);
            }
        }

        let reachable: HashSet<NodeId> = self.subtree(self.root, None).unwrap_or_default().into_iter().collect();
        for &id in self.nodes.keys() {
            if !reachable.contains(&id) {
                out.push(Violation::at(id, "not reachable from the root"));
            }
        }

        self.annotations.validate(self, &mut out);
        self.memory.validate(self, &self.ids, &mut out);
        let mut names = HashSet::new();
        for t in &self.templates {
            if !names.insert(t.name.as_str()) {
                out.push(Violation::global(format!("duplicate template {:?}", t.name)));
            }
        }

        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

fn has_duplicates(ids: &[NodeId]) -> bool {
    let mut seen = HashSet::new();
    ids.iter().any(|id| !seen.insert(id))
}

/// Partition token metadata at a byte offset when the offset falls on a token
/// boundary; otherwise the upper half keeps all of it.
fn split_meta(meta: Option<GenMeta>, byte: usize) -> (Option<GenMeta>, Option<GenMeta>) {
    let Some(mut meta) = meta else { return (None, None) };
    let mut acc = 0;
    let mut cut = None;
    for (i, t) in meta.tokens.iter().enumerate() {
        if acc == byte {
            cut = Some(i);
            break;
        }
        acc += t.token.len();
    }
    match cut {
        Some(i) if i > 0 => {
            let lower_tokens = meta.tokens.split_off(i);
            let lower = GenMeta { tokens: lower_tokens, ..meta.clone() };
            (Some(meta), Some(lower))
        }
        _ => (Some(meta), None),
    }
}

fn merge_meta(upper: Option<GenMeta>, lower: Option<GenMeta>) -> Option<GenMeta> {
    match (upper, lower) {
        (Some(mut u), Some(l)) if u.provider == l.provider && u.params == l.params => {
            u.tokens.extend(l.tokens);
            Some(u)
        }
        (u, _) => u,
    }
}
