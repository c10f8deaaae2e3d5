use std::fmt;

use serde::Serialize;

use crate::ids::{ChapterId, MemoryId, NodeId, NoteId};

/// Errors raised by document mutations and queries.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DocError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} must have non-empty text")]
    EmptyText(NodeId),
    #[error("split offset {offset} is outside 1..{len} for node {node}")]
    OffsetOutOfRange { node: NodeId, offset: usize, len: usize },
    #[error("cannot {0} the root node")]
    RootOperation(&'static str),
    #[error("node {0} has more than one parent")]
    MultipleParents(NodeId),
    #[error("parent {parent} of {node} has other children")]
    HasSiblings { node: NodeId, parent: NodeId },
    #[error("node {node} and its parent {parent} are both chapter roots")]
    ChapterConflict { node: NodeId, parent: NodeId },
    #[error("node {0} cannot be its own parent")]
    SelfParent(NodeId),
    #[error("node {0} would be left without parents")]
    NoParents(NodeId),
    #[error("{active} is not among the parents of {node}")]
    ActiveNotParent { node: NodeId, active: NodeId },
    #[error("making {active} the active parent of {node} would create an active-parent cycle")]
    ActiveCycle { node: NodeId, active: NodeId },
    #[error("node {0} is already a chapter root")]
    DuplicateChapter(NodeId),
    #[error("unknown chapter {0}")]
    UnknownChapter(ChapterId),
    #[error("unknown bookmark {0:?}")]
    UnknownBookmark(String),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("unknown note {0}")]
    UnknownNote(NoteId),
    #[error("unknown memory entry {0}")]
    UnknownMemory(MemoryId),
    #[error("memory entry text must not be empty")]
    EmptyMemory,
    #[error("no index terms could be extracted from memory text")]
    NoKeys,
    #[error("context budget {0} is below the minimum of 16 tokens")]
    BudgetTooSmall(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// One failed check from [`crate::Document::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

impl Violation {
    pub(crate) fn at(node: NodeId, message: impl Into<String>) -> Self {
        Self { node: Some(node), message: message.into() }
    }

    pub(crate) fn global(message: impl Into<String>) -> Self {
        Self { node: None, message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(node) => write!(f, "{node}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}
