//! Per-document event log with replay and live fan-out.
//!
//! Events are appended while the document store lock is held, so their ids
//! follow commit order. A subscriber takes the backlog and a live receiver
//! under the log lock and therefore sees every event exactly once.

use std::collections::VecDeque;
use std::sync::Mutex;

use loom_core::branching::ExpansionReport;
use loom_core::{Mutation, MutationOutcome, NodeId};
use serde::Serialize;
use tokio::sync::broadcast;

/// Events kept for replay.
pub const EVENT_HISTORY: usize = 100_000;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    Mutation {
        seq: u64,
        op: &'static str,
        mutation: Box<Mutation>,
        outcome: MutationOutcome,
        touched: Vec<NodeId>,
        #[serde(skip_serializing_if = "Option::is_none")]
        job: Option<String>,
    },
    JobStarted {
        job: String,
        kind: String,
        node: NodeId,
    },
    JobFinished {
        job: String,
        state: String,
        report: ExpansionReport,
    },
    Saved {
        seq: u64,
        path: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Mutation { .. } => "mutation",
            EventBody::JobStarted { .. } => "job_started",
            EventBody::JobFinished { .. } => "job_finished",
            EventBody::Saved { .. } => "saved",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Event {
    pub id: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug)]
struct Inner {
    next_id: u64,
    history: VecDeque<Event>,
}

#[derive(Debug)]
pub struct EventLog {
    inner: Mutex<Inner>,
    tx: broadcast::Sender<Event>,
}

pub enum Replay {
    Events(Vec<Event>, broadcast::Receiver<Event>),
    /// Events after the requested id are no longer retained.
    Expired {
        oldest: u64,
    },
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl EventLog {
    pub fn new() -> Self {
        let (tx, _) = broadcast::channel(4096);
        Self { inner: Mutex::new(Inner { next_id: 1, history: VecDeque::new() }), tx }
    }

    pub fn publish(&self, body: EventBody) -> u64 {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let event = Event { id: inner.next_id, body };
        inner.next_id += 1;
        inner.history.push_back(event.clone());
        if inner.history.len() > EVENT_HISTORY {
            inner.history.pop_front();
        }
        // no receivers is fine
        let _ = self.tx.send(event.clone());
        event.id
    }

    /// Events with id greater than `since`, plus a receiver for later ones.
    pub fn subscribe(&self, since: u64) -> Replay {
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(first) = inner.history.front() {
            if since + 1 < first.id {
                return Replay::Expired { oldest: first.id };
            }
        }
        let backlog = inner.history.iter().filter(|e| e.id > since).cloned().collect();
        Replay::Events(backlog, self.tx.subscribe())
    }

    pub fn last_id(&self) -> u64 {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).next_id - 1
    }
}
