//! Core of the loom multiverse writing engine.
//!
//! A [`Document`] holds a graph of text fragments. Every root-to-node path
//! along active-parent links is one candidate history; nodes may also carry
//! extra parents, and child edges may form cycles. Language models (see
//! [`provider`]) grow the graph through the [`branching`] engine, the
//! [`memory`] engine assembles their context, and [`search`] gives scoped
//! navigation over the result.

pub mod annotations;
pub mod branching;
pub mod error;
pub mod graph;
pub mod ids;
pub mod memory;
pub mod mutation;
pub mod persistence;
pub mod provider;
pub mod search;
pub mod store;
pub mod tools;

pub use annotations::{Bookmark, Chapter, FloatingNote, Scope, Tag};
pub use branching::{BranchPolicy, ExpansionReport, SelectionMode, StopReason};
pub use error::{DocError, Violation};
pub use graph::{DeleteReport, Document, Flag, GenMeta, Node, Settings};
pub use ids::{ChapterId, MemoryId, NodeId, NoteId};
pub use memory::{ContextBundle, MemoryEntry};
pub use mutation::{Mutation, MutationOutcome};
pub use provider::{
    Completion, FinishReason, GenerationParams, LanguageModel, ProviderConfig, ProviderError, TokenDistribution,
    TokenLogprob, TokenProb,
};
pub use search::{Match, SearchScope};
pub use store::{Committed, DocumentStore, StoreError};
pub use tools::{OutputHandling, PromptTemplate};
