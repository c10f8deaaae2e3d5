//! Chapters, bookmarks, tags, flags and floating notes.
//!
//! Chapter membership is never stored: a node belongs to the chapter rooted
//! at the closest node on its ancestry that starts a chapter, so topology
//! edits cannot leave membership stale.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{DocError, Violation};
use crate::graph::{DeleteReport, Document, Flag, Result};
use crate::ids::{ChapterId, NodeId, NoteId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chapter {
    pub id: ChapterId,
    pub title: String,
    pub root_node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bookmark {
    pub name: String,
    pub target: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub name: String,
    pub members: BTreeSet<NodeId>,
}

/// Where a note or memory entry is visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "node", rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Global,
    Subtree(NodeId),
}

impl Scope {
    pub fn node(self) -> Option<NodeId> {
        match self {
            Scope::Global => None,
            Scope::Subtree(n) => Some(n),
        }
    }

    /// Visible at a node whose active ancestry is `ancestry`.
    pub fn visible_on(self, ancestry: &[NodeId]) -> bool {
        match self {
            Scope::Global => true,
            Scope::Subtree(n) => ancestry.contains(&n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatingNote {
    pub id: NoteId,
    pub title: String,
    pub body: String,
    pub scope: Scope,
    /// Logical creation time.
    pub created: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Annotations {
    pub(crate) chapters: Vec<Chapter>,
    pub(crate) bookmarks: BTreeMap<String, NodeId>,
    pub(crate) tags: BTreeMap<String, BTreeSet<NodeId>>,
    pub(crate) notes: Vec<FloatingNote>,
}

impl Annotations {
    pub(crate) fn chapter_at(&self, node: NodeId) -> Option<&Chapter> {
        self.chapters.iter().find(|c| c.root_node == node)
    }

    /// Move every annotation on `from` onto `to`.
    pub(crate) fn retarget(&mut self, from: NodeId, to: NodeId) {
        for c in self.chapters.iter_mut().filter(|c| c.root_node == from) {
            c.root_node = to;
        }
        for target in self.bookmarks.values_mut().filter(|t| **t == from) {
            *target = to;
        }
        for members in self.tags.values_mut() {
            if members.remove(&from) {
                members.insert(to);
            }
        }
        for note in &mut self.notes {
            if note.scope == Scope::Subtree(from) {
                note.scope = Scope::Subtree(to);
            }
        }
    }

    pub(crate) fn drop_nodes(&mut self, removed: &HashSet<NodeId>, report: &mut DeleteReport) {
        self.chapters.retain(|c| {
            let keep = !removed.contains(&c.root_node);
            if !keep {
                report.dropped_chapters.push(c.id);
            }
            keep
        });
        self.bookmarks.retain(|name, target| {
            let keep = !removed.contains(target);
            if !keep {
                report.dropped_bookmarks.push(name.clone());
            }
            keep
        });
        for (name, members) in &mut self.tags {
            members.retain(|m| {
                let keep = !removed.contains(m);
                if !keep {
                    report.untagged.push((name.clone(), *m));
                }
                keep
            });
        }
        self.notes.retain(|n| {
            let keep = n.scope.node().is_none_or(|s| !removed.contains(&s));
            if !keep {
                report.dropped_notes.push(n.id);
            }
            keep
        });
    }

    pub(crate) fn validate(&self, doc: &Document, out: &mut Vec<Violation>) {
        let mut roots = HashSet::new();
        for c in &self.chapters {
            if !doc.contains(c.root_node) {
                out.push(Violation::at(c.root_node, format!("chapter {} roots at a missing node", c.id)));
            }
            if !roots.insert(c.root_node) {
                out.push(Violation::at(c.root_node, "more than one chapter roots here"));
            }
        }
        for (name, target) in &self.bookmarks {
            if !doc.contains(*target) {
                out.push(Violation::at(*target, format!("bookmark {name:?} targets a missing node")));
            }
        }
        for (name, members) in &self.tags {
            for m in members.iter().filter(|m| !doc.contains(**m)) {
                out.push(Violation::at(*m, format!("tag {name:?} lists a missing node")));
            }
        }
        for note in &self.notes {
            if let Some(n) = note.scope.node().filter(|n| !doc.contains(*n)) {
                out.push(Violation::at(n, format!("note {} is scoped to a missing node", note.id)));
            }
        }
    }
}

impl Document {
    pub fn chapters(&self) -> &[Chapter] {
        &self.annotations.chapters
    }

    pub fn create_chapter(&mut self, node: NodeId, title: impl Into<String>) -> Result<Chapter> {
        self.ensure(node)?;
        if self.annotations.chapter_at(node).is_some() {
            return Err(DocError::DuplicateChapter(node));
        }
        let chapter = Chapter { id: self.ids.chapter(), title: title.into(), root_node: node };
        self.annotations.chapters.push(chapter.clone());
        self.touch();
        Ok(chapter)
    }

    pub fn remove_chapter(&mut self, id: ChapterId) -> Result<Chapter> {
        let pos = self.annotations.chapters.iter().position(|c| c.id == id).ok_or(DocError::UnknownChapter(id))?;
        self.touch();
        Ok(self.annotations.chapters.remove(pos))
    }

    /// The chapter rooted at the closest node on the ancestry of `node`,
    /// `node` itself included.
    pub fn chapter_of(&self, node: NodeId) -> Result<Option<&Chapter>> {
        let by_root: HashMap<NodeId, &Chapter> = self.annotations.chapters.iter().map(|c| (c.root_node, c)).collect();
        Ok(self.ancestry(node)?.iter().rev().find_map(|n| by_root.get(n).copied()))
    }

    /// Every node belonging to `chapter`, in breadth-first order of the
    /// active tree.
    pub fn chapter_members(&self, chapter: ChapterId) -> Result<Vec<NodeId>> {
        let start = self
            .annotations
            .chapters
            .iter()
            .find(|c| c.id == chapter)
            .ok_or(DocError::UnknownChapter(chapter))?
            .root_node;
        let mut members = vec![start];
        let mut i = 0;
        while i < members.len() {
            for child in self.active_children(members[i])? {
                if self.annotations.chapter_at(child).is_none() {
                    members.push(child);
                }
            }
            i += 1;
        }
        Ok(members)
    }

    /// Set or clear a flag. Canonical and exploratory exclude each other;
    /// marking a node canonical marks its whole ancestry canonical.
    pub fn set_flag(&mut self, node: NodeId, flag: Flag, on: bool) -> Result<()> {
        self.ensure(node)?;
        let targets = match (flag, on) {
            (Flag::Canonical, true) => self.ancestry(node)?,
            _ => vec![node],
        };
        for id in targets {
            let flags = &mut self.node_mut(id)?.flags;
            if on {
                flags.insert(flag);
                match flag {
                    Flag::Canonical => flags.remove(&Flag::Exploratory),
                    Flag::Exploratory => flags.remove(&Flag::Canonical),
                    Flag::Collapsed => false,
                };
            } else {
                flags.remove(&flag);
            }
        }
        self.touch();
        Ok(())
    }

    pub fn bookmarks(&self) -> impl Iterator<Item = Bookmark> + '_ {
        self.annotations.bookmarks.iter().map(|(name, target)| Bookmark { name: name.clone(), target: *target })
    }

    /// Point `name` at `node`, replacing any previous target.
    pub fn set_bookmark(&mut self, name: impl Into<String>, node: NodeId) -> Result<()> {
        self.ensure(node)?;
        let name = name.into();
        if name.is_empty() {
            return Err(DocError::Invalid("bookmark name must not be empty".into()));
        }
        self.annotations.bookmarks.insert(name, node);
        self.touch();
        Ok(())
    }

    pub fn remove_bookmark(&mut self, name: &str) -> Result<NodeId> {
        let target =
            self.annotations.bookmarks.remove(name).ok_or_else(|| DocError::UnknownBookmark(name.to_owned()))?;
        self.touch();
        Ok(target)
    }

    pub fn resolve_bookmark(&self, name: &str) -> Result<NodeId> {
        self.annotations.bookmarks.get(name).copied().ok_or_else(|| DocError::UnknownBookmark(name.to_owned()))
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.annotations.tags.iter().map(|(name, members)| Tag { name: name.clone(), members: members.clone() })
    }

    pub fn tag(&mut self, node: NodeId, name: impl Into<String>) -> Result<()> {
        self.ensure(node)?;
        let name = name.into();
        if name.is_empty() {
            return Err(DocError::Invalid("tag name must not be empty".into()));
        }
        self.annotations.tags.entry(name).or_default().insert(node);
        self.touch();
        Ok(())
    }

    /// Remove `node` from a tag. The tag itself stays, possibly empty.
    pub fn untag(&mut self, node: NodeId, name: &str) -> Result<()> {
        let members = self.annotations.tags.get_mut(name).ok_or_else(|| DocError::UnknownTag(name.to_owned()))?;
        members.remove(&node);
        self.touch();
        Ok(())
    }

    pub fn resolve_tag(&self, name: &str) -> Result<&BTreeSet<NodeId>> {
        self.annotations.tags.get(name).ok_or_else(|| DocError::UnknownTag(name.to_owned()))
    }

    pub fn notes(&self) -> &[FloatingNote] {
        &self.annotations.notes
    }

    pub fn add_note(&mut self, title: impl Into<String>, body: impl Into<String>, scope: Scope) -> Result<NoteId> {
        if let Some(n) = scope.node() {
            self.ensure(n)?;
        }
        let note = FloatingNote {
            id: self.ids.note(),
            title: title.into(),
            body: body.into(),
            scope,
            created: self.ids.tick(),
        };
        let id = note.id;
        self.annotations.notes.push(note);
        self.touch();
        Ok(id)
    }

    pub fn update_note(&mut self, id: NoteId, title: Option<String>, body: Option<String>) -> Result<()> {
        let note = self.annotations.notes.iter_mut().find(|n| n.id == id).ok_or(DocError::UnknownNote(id))?;
        if let Some(title) = title {
            note.title = title;
        }
        if let Some(body) = body {
            note.body = body;
        }
        self.touch();
        Ok(())
    }

    pub fn remove_note(&mut self, id: NoteId) -> Result<FloatingNote> {
        let pos = self.annotations.notes.iter().position(|n| n.id == id).ok_or(DocError::UnknownNote(id))?;
        self.touch();
        Ok(self.annotations.notes.remove(pos))
    }

    /// Global notes, then notes scoped to a node on the ancestry of `node`,
    /// each group in creation order.
    pub fn notes_visible_at(&self, node: NodeId) -> Result<Vec<&FloatingNote>> {
        let ancestry = self.ancestry(node)?;
        let mut visible: Vec<&FloatingNote> =
            self.annotations.notes.iter().filter(|n| n.scope.visible_on(&ancestry)).collect();
        visible.sort_by_key(|n| (n.scope != Scope::Global, n.created, n.id));
        Ok(visible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_chapter_covers_everything() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        let b = doc.create_child(a, "b").unwrap();
        let ch = doc.create_chapter(doc.root(), "I").unwrap();
        for n in [doc.root(), a, b] {
            assert_eq!(doc.chapter_of(n).unwrap(), Some(&ch));
        }
        assert_eq!(doc.create_chapter(doc.root(), "again"), Err(DocError::DuplicateChapter(doc.root())));
    }

    #[test]
    fn closest_chapter_wins() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        let b = doc.create_child(a, "b").unwrap();
        let c = doc.create_child(b, "c").unwrap();
        doc.create_chapter(doc.root(), "I").unwrap();
        let two = doc.create_chapter(b, "II").unwrap();
        assert_eq!(doc.chapter_of(c).unwrap().unwrap().title, "II");
        assert_eq!(doc.chapter_of(b).unwrap().unwrap().title, "II");
        assert_eq!(doc.chapter_of(a).unwrap().unwrap().title, "I");
        assert_eq!(doc.chapter_members(two.id).unwrap(), vec![b, c]);
    }

    #[test]
    fn node_above_chapters_has_none() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        doc.create_chapter(a, "I").unwrap();
        assert_eq!(doc.chapter_of(doc.root()).unwrap(), None);
    }

    #[test]
    fn canonical_propagates_and_excludes_exploratory() {
        let mut doc = Document::new("r");
        let mut last = doc.root();
        for t in ["a", "b", "c", "d"] {
            last = doc.create_child(last, t).unwrap();
        }
        doc.set_flag(last, Flag::Canonical, true).unwrap();
        let canonical = doc.nodes().filter(|n| n.has_flag(Flag::Canonical)).count();
        assert_eq!(canonical, 5);
        assert!(doc.nodes().all(|n| !n.has_flag(Flag::Exploratory)));

        let parent = doc.node(last).unwrap().active_parent().unwrap();
        doc.set_flag(parent, Flag::Exploratory, true).unwrap();
        assert!(!doc.node(parent).unwrap().has_flag(Flag::Canonical));
        assert!(doc.node(last).unwrap().has_flag(Flag::Canonical));
        assert_eq!(doc.nodes().filter(|n| n.has_flag(Flag::Canonical)).count(), 4);
    }

    #[test]
    fn bookmark_overwrite_and_unknown() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        doc.set_bookmark("here", doc.root()).unwrap();
        doc.set_bookmark("here", a).unwrap();
        assert_eq!(doc.resolve_bookmark("here").unwrap(), a);
        assert_eq!(doc.remove_bookmark("nope"), Err(DocError::UnknownBookmark("nope".into())));
        assert!(doc.resolve_bookmark("nope").is_err());
    }

    #[test]
    fn tags_are_many_to_many() {
        let mut doc = Document::new("r");
        let ids: Vec<_> = (0..3).map(|i| doc.create_child(doc.root(), format!("{i}")).unwrap()).collect();
        for &n in &ids {
            doc.tag(n, "timeline-A").unwrap();
        }
        doc.untag(ids[0], "timeline-A").unwrap();
        assert_eq!(doc.resolve_tag("timeline-A").unwrap().len(), 2);
        assert_eq!(doc.untag(ids[0], "other"), Err(DocError::UnknownTag("other".into())));
        doc.untag(ids[1], "timeline-A").unwrap();
        doc.untag(ids[2], "timeline-A").unwrap();
        assert!(doc.resolve_tag("timeline-A").unwrap().is_empty());
    }

    #[test]
    fn deleting_drops_dangling_references() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        let b = doc.create_child(a, "b").unwrap();
        doc.set_bookmark("mark", b).unwrap();
        doc.tag(b, "t").unwrap();
        doc.tag(doc.root(), "t").unwrap();
        doc.create_chapter(a, "A").unwrap();
        doc.add_note("n", "body", Scope::Subtree(b)).unwrap();
        let report = doc.delete_subtree(a).unwrap();
        assert_eq!(report.dropped_bookmarks, vec!["mark".to_string()]);
        assert_eq!(report.dropped_chapters.len(), 1);
        assert_eq!(report.dropped_notes.len(), 1);
        assert_eq!(report.untagged, vec![("t".to_string(), b)]);
        assert_eq!(doc.resolve_tag("t").unwrap().len(), 1);
        doc.validate().unwrap();
    }

    #[test]
    fn note_visibility() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        let sib = doc.create_child(doc.root(), "s").unwrap();
        let a2 = doc.create_child(a, "a2").unwrap();
        let scoped = doc.add_note("scoped", "", Scope::Subtree(a)).unwrap();
        let global = doc.add_note("global", "", Scope::Global).unwrap();
        let ids = |n| doc.notes_visible_at(n).unwrap().iter().map(|n| n.id).collect::<Vec<_>>();
        assert_eq!(ids(a2), vec![global, scoped]);
        assert_eq!(ids(a), vec![global, scoped]);
        assert_eq!(ids(sib), vec![global]);
        assert_eq!(ids(doc.root()), vec![global]);
    }

    #[test]
    fn split_moves_annotations_to_lower() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "abcd").unwrap();
        let ch = doc.create_chapter(a, "A").unwrap();
        doc.set_bookmark("bm", a).unwrap();
        let (_, lower) = doc.split_node(a, 2).unwrap();
        assert_eq!(doc.chapters()[0].root_node, lower);
        assert_eq!(doc.resolve_bookmark("bm").unwrap(), lower);
        assert_eq!(doc.chapter_of(lower).unwrap().map(|c| c.id), Some(ch.id));
        assert_eq!(doc.chapter_of(a).unwrap(), None);
    }

    #[test]
    fn merge_refuses_two_chapter_roots() {
        let mut doc = Document::new("r");
        let a = doc.create_child(doc.root(), "a").unwrap();
        let b = doc.create_child(a, "b").unwrap();
        doc.create_chapter(a, "A").unwrap();
        doc.create_chapter(b, "B").unwrap();
        assert_eq!(doc.merge_with_parent(b), Err(DocError::ChapterConflict { node: b, parent: a }));
    }

    #[test]
    fn scope_serde_shape() {
        let s = serde_json::to_value(Scope::Subtree(NodeId::from_raw(3))).unwrap();
        assert_eq!(s, serde_json::json!({"kind": "subtree", "node": "n3"}));
        let g = serde_json::to_value(Scope::Global).unwrap();
        assert_eq!(g, serde_json::json!({"kind": "global"}));
    }
}
