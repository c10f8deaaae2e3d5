//! Serializable document mutations.
//!
//! Every change a client can ask for is a [`Mutation`]. Applying one to a
//! [`Document`] either succeeds completely or leaves the document untouched.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::annotations::Scope;
use crate::error::DocError;
use crate::graph::{DeleteReport, Document, Flag, GenMeta, Result, Settings};
use crate::ids::{ChapterId, MemoryId, NodeId, NoteId};
use crate::provider::ProviderConfig;
use crate::tools::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mutation {
    CreateChild {
        parent: NodeId,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gen_meta: Option<GenMeta>,
    },
    SetText {
        node: NodeId,
        text: String,
    },
    SetFlag {
        node: NodeId,
        flag: Flag,
        on: bool,
    },
    Split {
        node: NodeId,
        offset: usize,
    },
    Merge {
        node: NodeId,
    },
    Reparent {
        node: NodeId,
        #[serde(default)]
        add: Vec<NodeId>,
        #[serde(default)]
        remove: Vec<NodeId>,
        #[serde(default)]
        active: Option<NodeId>,
    },
    Delete {
        node: NodeId,
    },
    CreateChapter {
        node: NodeId,
        title: String,
    },
    RemoveChapter {
        chapter: ChapterId,
    },
    SetBookmark {
        name: String,
        node: NodeId,
    },
    RemoveBookmark {
        name: String,
    },
    Tag {
        node: NodeId,
        name: String,
    },
    Untag {
        node: NodeId,
        name: String,
    },
    AddNote {
        title: String,
        body: String,
        #[serde(default)]
        scope: Scope,
    },
    UpdateNote {
        note: NoteId,
        #[serde(default)]
        title: Option<String>,
        #[serde(default)]
        body: Option<String>,
    },
    RemoveNote {
        note: NoteId,
    },
    SaveMemory {
        text: String,
        #[serde(default)]
        keys: Option<Vec<String>>,
        #[serde(default)]
        scope: Scope,
    },
    RemoveMemory {
        memory: MemoryId,
    },
    SetSettings {
        settings: Settings,
    },
    SetProvider {
        provider: Option<ProviderConfig>,
    },
    UpsertTemplate {
        template: PromptTemplate,
    },
    RemoveTemplate {
        name: String,
    },
}

/// What an applied mutation produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MutationOutcome {
    /// Id of the created node, chapter, note or memory entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    /// Nodes that resulted from the mutation: the new node, both halves of
    /// a split, or the surviving node of a merge.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted: Option<DeleteReport>,
}

impl MutationOutcome {
    fn created(id: impl ToString) -> Self {
        Self { created: Some(id.to_string()), ..Self::default() }
    }
}

impl Mutation {
    /// Short name of the operation, as used in the `op` field.
    pub fn op(&self) -> &'static str {
        match self {
            Mutation::CreateChild { .. } => "create_child",
            Mutation::SetText { .. } => "set_text",
            Mutation::SetFlag { .. } => "set_flag",
            Mutation::Split { .. } => "split",
            Mutation::Merge { .. } => "merge",
            Mutation::Reparent { .. } => "reparent",
            Mutation::Delete { .. } => "delete",
            Mutation::CreateChapter { .. } => "create_chapter",
            Mutation::RemoveChapter { .. } => "remove_chapter",
            Mutation::SetBookmark { .. } => "set_bookmark",
            Mutation::RemoveBookmark { .. } => "remove_bookmark",
            Mutation::Tag { .. } => "tag",
            Mutation::Untag { .. } => "untag",
            Mutation::AddNote { .. } => "add_note",
            Mutation::UpdateNote { .. } => "update_note",
            Mutation::RemoveNote { .. } => "remove_note",
            Mutation::SaveMemory { .. } => "save_memory",
            Mutation::RemoveMemory { .. } => "remove_memory",
            Mutation::SetSettings { .. } => "set_settings",
            Mutation::SetProvider { .. } => "set_provider",
            Mutation::UpsertTemplate { .. } => "upsert_template",
            Mutation::RemoveTemplate { .. } => "remove_template",
        }
    }

    /// Nodes the mutation reads or writes by id.
    pub fn referenced_nodes(&self) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        match self {
            Mutation::CreateChild { parent, .. } => {
                out.insert(*parent);
            }
            Mutation::SetText { node, .. }
            | Mutation::SetFlag { node, .. }
            | Mutation::Split { node, .. }
            | Mutation::Merge { node }
            | Mutation::Delete { node }
            | Mutation::CreateChapter { node, .. }
            | Mutation::SetBookmark { node, .. }
            | Mutation::Tag { node, .. }
            | Mutation::Untag { node, .. } => {
                out.insert(*node);
            }
            Mutation::Reparent { node, add, remove, active } => {
                out.insert(*node);
                out.extend(add.iter().chain(remove).chain(active.as_ref()));
            }
            Mutation::AddNote { scope, .. } | Mutation::SaveMemory { scope, .. } => {
                out.extend(scope.node());
            }
            _ => {}
        }
        out
    }
}

impl Document {
    /// Apply a mutation atomically: on error the document is unchanged.
    pub fn apply(&mut self, mutation: Mutation) -> Result<MutationOutcome> {
        let mut outcome = MutationOutcome::default();
        match mutation {
            Mutation::CreateChild { parent, text, gen_meta } => {
                let id = match gen_meta {
                    Some(meta) => self.create_generated_child(parent, text, meta)?,
                    None => self.create_child(parent, text)?,
                };
                outcome = MutationOutcome::created(id);
                outcome.nodes.push(id);
            }
            Mutation::SetText { node, text } => self.set_text(node, text)?,
            Mutation::SetFlag { node, flag, on } => self.set_flag(node, flag, on)?,
            Mutation::Split { node, offset } => {
                let (upper, lower) = self.split_node(node, offset)?;
                outcome = MutationOutcome::created(lower);
                outcome.nodes = vec![upper, lower];
            }
            Mutation::Merge { node } => outcome.nodes.push(self.merge_with_parent(node)?),
            Mutation::Reparent { node, add, remove, active } => self.reparent(node, &add, &remove, active)?,
            Mutation::Delete { node } => outcome.deleted = Some(self.delete_subtree(node)?),
            Mutation::CreateChapter { node, title } => {
                outcome = MutationOutcome::created(self.create_chapter(node, title)?.id)
            }
            Mutation::RemoveChapter { chapter } => {
                self.remove_chapter(chapter)?;
            }
            Mutation::SetBookmark { name, node } => self.set_bookmark(name, node)?,
            Mutation::RemoveBookmark { name } => {
                self.remove_bookmark(&name)?;
            }
            Mutation::Tag { node, name } => self.tag(node, name)?,
            Mutation::Untag { node, name } => self.untag(node, &name)?,
            Mutation::AddNote { title, body, scope } => {
                outcome = MutationOutcome::created(self.add_note(title, body, scope)?)
            }
            Mutation::UpdateNote { note, title, body } => self.update_note(note, title, body)?,
            Mutation::RemoveNote { note } => {
                self.remove_note(note)?;
            }
            Mutation::SaveMemory { text, keys, scope } => {
                outcome = MutationOutcome::created(self.save_memory(text, keys, scope)?.id)
            }
            Mutation::RemoveMemory { memory } => {
                self.remove_memory(memory)?;
            }
            Mutation::SetSettings { settings } => {
                if settings.context_budget_tokens < 16 {
                    return Err(DocError::BudgetTooSmall(settings.context_budget_tokens));
                }
                self.set_settings(settings)
            }
            Mutation::SetProvider { provider } => {
                if let Some(p) = &provider {
                    p.validate().map_err(|e| DocError::Invalid(e.to_string()))?;
                }
                self.set_provider_config(provider)
            }
            Mutation::UpsertTemplate { template } => {
                self.upsert_template(template).map_err(|e| DocError::Invalid(e.to_string()))?
            }
            Mutation::RemoveTemplate { name } => {
                self.remove_template(&name).map_err(|e| DocError::Invalid(e.to_string()))?;
            }
        }
        Ok(outcome)
    }

    /// Nodes that differ between two versions of a document, including nodes
    /// present in only one of them.
    pub fn changed_nodes(&self, other: &Document) -> Vec<NodeId> {
        let mut out: Vec<NodeId> =
            self.nodes.iter().filter(|(id, node)| other.nodes.get(id) != Some(node)).map(|(id, _)| *id).collect();
        out.extend(other.nodes.keys().filter(|id| !self.nodes.contains_key(id)));
        out.sort();
        out
    }
}
