//! Opaque identifiers.
//!
//! Ids are allocated from per-document counters and rendered as a short
//! prefix followed by a decimal number (`n12`, `c3`). Counters only move
//! forward, so a deleted id is never handed out again.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed id {0:?}")]
pub struct ParseIdError(pub String);

macro_rules! define_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(u64);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            pub fn from_raw(raw: u64) -> Self {
                Self(raw)
            }

            pub fn raw(self) -> u64 {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.0)
            }
        }

        impl FromStr for $name {
            type Err = ParseIdError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.strip_prefix($prefix)
                    .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|rest| rest.parse().ok())
                    .map(Self)
                    .ok_or_else(|| ParseIdError(s.to_owned()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

define_id!(
    /// Identifies a node. Stable across save/load.
    NodeId,
    "n"
);
define_id!(ChapterId, "c");
define_id!(NoteId, "note");
define_id!(MemoryId, "m");

/// Next-id counters for everything a document allocates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounters {
    pub node: u64,
    pub chapter: u64,
    pub note: u64,
    pub memory: u64,
    /// Logical clock used for creation order of notes and memory entries.
    pub clock: u64,
}

impl IdCounters {
    pub(crate) fn node(&mut self) -> NodeId {
        let id = NodeId(self.node);
        self.node += 1;
        id
    }

    pub(crate) fn chapter(&mut self) -> ChapterId {
        let id = ChapterId(self.chapter);
        self.chapter += 1;
        id
    }

    pub(crate) fn note(&mut self) -> NoteId {
        let id = NoteId(self.note);
        self.note += 1;
        id
    }

    pub(crate) fn memory(&mut self) -> MemoryId {
        let id = MemoryId(self.memory);
        self.memory += 1;
        id
    }

    pub(crate) fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let id: NodeId = "n42".parse().unwrap();
        assert_eq!(id.raw(), 42);
        assert_eq!(id.to_string(), "n42");
        assert!("n".parse::<NodeId>().is_err());
        assert!("x1".parse::<NodeId>().is_err());
        assert!("n-1".parse::<NodeId>().is_err());
        // NoteId prefix is not confused with NodeId
        assert!("note1".parse::<NodeId>().is_err());
        assert_eq!("note1".parse::<NoteId>().unwrap().raw(), 1);
    }

    #[test]
    fn serde_as_string() {
        let id = ChapterId::from_raw(7);
        assert_eq!(serde_json::to_string(&id).unwrap(), "\"c7\"");
        let back: ChapterId = serde_json::from_str("\"c7\"").unwrap();
        assert_eq!(back, id);
    }
}
