//! Single-writer document store with snapshot reads.
//!
//! Readers take an `Arc` snapshot and never block writers for long. Writers
//! are serialized: each commit works on a copy and swaps it in only when the
//! whole change succeeded, then bumps the sequence number.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::DocError;
use crate::graph::Document;
use crate::ids::NodeId;
use crate::mutation::{Mutation, MutationOutcome};

#[derive(Debug, Clone)]
pub struct Committed<T> {
    pub seq: u64,
    pub value: T,
    /// Nodes whose content or links changed, including removed ones.
    pub touched: Vec<NodeId>,
    pub doc: Arc<Document>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Document(#[from] DocError),
    #[error("nodes {nodes:?} changed after sequence {base_seq} (now {current_seq})")]
    Conflict { base_seq: u64, current_seq: u64, nodes: Vec<NodeId> },
}

#[derive(Debug)]
struct State {
    doc: Arc<Document>,
    seq: u64,
    touched_at: HashMap<NodeId, u64>,
}

#[derive(Debug)]
pub struct DocumentStore {
    state: Mutex<State>,
}

impl DocumentStore {
    pub fn new(doc: Document) -> Self {
        Self { state: Mutex::new(State { doc: Arc::new(doc), seq: 0, touched_at: HashMap::new() }) }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn snapshot(&self) -> Arc<Document> {
        self.lock().doc.clone()
    }

    /// The snapshot together with the sequence number it corresponds to.
    pub fn versioned(&self) -> (Arc<Document>, u64) {
        let s = self.lock();
        (s.doc.clone(), s.seq)
    }

    pub fn seq(&self) -> u64 {
        self.lock().seq
    }

    /// Run `f` on a private copy and publish it if `f` succeeds.
    pub fn commit<T, E>(&self, f: impl FnOnce(&mut Document) -> Result<T, E>) -> Result<Committed<T>, E> {
        self.commit_then(f, |_| {})
    }

    /// Like [`Self::commit`], calling `after` before the lock is released so
    /// observers see commits in sequence order.
    pub fn commit_then<T, E>(
        &self,
        f: impl FnOnce(&mut Document) -> Result<T, E>,
        after: impl FnOnce(&Committed<T>),
    ) -> Result<Committed<T>, E> {
        let mut state = self.lock();
        let committed = Self::commit_locked(&mut state, f)?;
        after(&committed);
        Ok(committed)
    }

    fn commit_locked<T, E>(
        state: &mut State,
        f: impl FnOnce(&mut Document) -> Result<T, E>,
    ) -> Result<Committed<T>, E> {
        let mut next = (*state.doc).clone();
        let value = f(&mut next)?;
        let touched = state.doc.changed_nodes(&next);
        state.seq += 1;
        for id in &touched {
            // a node that only gained or lost children is not a conflict
            let only_children = match (state.doc.node(*id), next.node(*id)) {
                (Ok(a), Ok(b)) => a.same_content(b),
                _ => false,
            };
            if !only_children {
                state.touched_at.insert(*id, state.seq);
            }
        }
        state.doc = Arc::new(next);
        Ok(Committed { seq: state.seq, value, touched, doc: state.doc.clone() })
    }

    /// Nodes among `nodes` changed after `base_seq`.
    pub fn changed_since(&self, base_seq: u64, nodes: &BTreeSet<NodeId>) -> Vec<NodeId> {
        let state = self.lock();
        nodes.iter().copied().filter(|n| state.touched_at.get(n).is_some_and(|s| *s > base_seq)).collect()
    }

    /// Apply a mutation. With `base_seq`, the mutation is refused when any
    /// node it references changed after that sequence number. Gaining or
    /// losing children does not count as a change of the parent.
    pub fn apply(
        &self,
        mutation: Mutation,
        base_seq: Option<u64>,
        after: impl FnOnce(&Committed<MutationOutcome>),
    ) -> Result<Committed<MutationOutcome>, StoreError> {
        let mut state = self.lock();
        if let Some(base) = base_seq {
            let conflicting: Vec<NodeId> = mutation
                .referenced_nodes()
                .into_iter()
                .filter(|n| state.touched_at.get(n).is_some_and(|s| *s > base))
                .collect();
            if !conflicting.is_empty() {
                return Err(StoreError::Conflict { base_seq: base, current_seq: state.seq, nodes: conflicting });
            }
        }
        let committed = Self::commit_locked(&mut state, |doc| doc.apply(mutation))?;
        after(&committed);
        Ok(committed)
    }

    /// Mark the current version as saved (see [`Document::stamp_saved`])
    /// and return it. Does not advance the sequence number.
    pub fn stamp_saved(&self, now: impl FnOnce() -> String) -> Arc<Document> {
        let mut state = self.lock();
        let mut doc = (*state.doc).clone();
        doc.stamp_saved(now);
        state.doc = Arc::new(doc);
        state.doc.clone()
    }
}
