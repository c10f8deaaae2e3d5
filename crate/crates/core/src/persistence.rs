//! On-disk format, canonical serialization and autosave.
//!
//! A document is stored as one JSON object with sorted keys, nodes listed in
//! id order, two-space indentation and a trailing newline. Files ending in
//! `.gz` are gzip-compressed. Fields this version does not know are kept
//! and written back unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotations::Annotations;
use crate::error::Violation;
use crate::graph::{Document, Node, Settings};
use crate::ids::{IdCounters, NodeId};
use crate::memory::MemoryStore;
use crate::provider::ProviderConfig;
use crate::tools::PromptTemplate;

pub const FORMAT_VERSION: u64 = 1;
pub const EXTENSION: &str = ".loom.json";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PersistError {
    #[error("{0}")]
    Io(String),
    #[error("not a loom document: {0}")]
    Parse(String),
    #[error("format version {found} is newer than the supported version {supported}")]
    UnsupportedVersion { found: u64, supported: u64 },
    #[error("document violates invariants: {}", describe(.0))]
    Invalid(Vec<Violation>),
}

fn describe(violations: &[Violation]) -> String {
    violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl PersistError {
    /// Nodes named by an invariant failure.
    pub fn offending_nodes(&self) -> Vec<NodeId> {
        match self {
            PersistError::Invalid(v) => {
                let mut ids: Vec<NodeId> = v.iter().filter_map(|v| v.node).collect();
                ids.sort();
                ids.dedup();
                ids
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DocumentFile {
    format_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    saved_at: Option<String>,
    root: NodeId,
    ids: IdCounters,
    nodes: Vec<Node>,
    #[serde(default)]
    annotations: Annotations,
    #[serde(default)]
    memory: MemoryStore,
    #[serde(default)]
    templates: Vec<PromptTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provider: Option<ProviderConfig>,
    #[serde(default)]
    settings: Settings,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

/// The document as a JSON value with the file layout.
pub fn to_value(doc: &Document) -> Value {
    let file = DocumentFile {
        format_version: FORMAT_VERSION,
        saved_at: doc.saved_at.clone(),
        root: doc.root,
        ids: doc.ids.clone(),
        nodes: doc.nodes.values().cloned().collect(),
        annotations: doc.annotations.clone(),
        memory: doc.memory.clone(),
        templates: doc.templates.clone(),
        provider: doc.provider.clone(),
        settings: doc.settings.clone(),
        extra: doc.extra.clone(),
    };
    // serde_json maps are ordered by key, so the value is canonical
    serde_json::to_value(file).expect("document is serializable")
}

/// Canonical text of the document.
pub fn to_canonical_string(doc: &Document) -> String {
    let mut s = serde_json::to_string_pretty(&to_value(doc)).expect("value is serializable");
    s.push('\n');
    s
}

/// Upgrade an older file in place. Version 0 had no `active_parent`; the
/// first parent was the active one.
pub fn migrate(mut value: Value) -> Result<Value, PersistError> {
    let version = value
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| PersistError::Parse("missing format_version".into()))?;
    if version > FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    if version == 0 {
        if let Some(nodes) = value.get_mut("nodes").and_then(Value::as_array_mut) {
            for node in nodes.iter_mut().filter_map(Value::as_object_mut) {
                if !node.contains_key("active_parent") {
                    let first = node.get("parents").and_then(|p| p.get(0)).cloned().unwrap_or(Value::Null);
                    node.insert("active_parent".into(), first);
                }
            }
        }
        value["format_version"] = Value::from(FORMAT_VERSION);
    }
    Ok(value)
}

pub fn from_value(value: Value) -> Result<Document, PersistError> {
    let file: DocumentFile = serde_json::from_value(migrate(value)?).map_err(|e| PersistError::Parse(e.to_string()))?;
    let mut nodes = BTreeMap::new();
    for node in file.nodes {
        let id = node.id;
        if nodes.insert(id, node).is_some() {
            return Err(PersistError::Invalid(vec![Violation::at(id, "duplicate node id")]));
        }
    }
    let doc = Document::from_parts(
        nodes,
        file.root,
        file.ids,
        file.annotations,
        file.memory,
        file.templates,
        file.provider,
        file.settings,
        file.saved_at,
        file.extra,
    );
    doc.validate().map_err(PersistError::Invalid)?;
    Ok(doc)
}

pub fn from_str(text: &str) -> Result<Document, PersistError> {
    let value: Value = serde_json::from_str(text).map_err(|e| PersistError::Parse(e.to_string()))?;
    from_value(value)
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PersistError {
    PersistError::Io(format!("{}: {e}", path.display()))
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Write the document exactly as it is (no timestamp update). The file is
/// replaced atomically.
pub fn write(doc: &Document, path: &Path) -> Result<(), PersistError> {
    let text = to_canonical_string(doc);
    let bytes = if is_gzip(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
        enc.finish().map_err(|e| io_err(path, e))?
    } else {
        text.into_bytes()
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| io_err(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Stamp and write. Saving an unchanged document leaves the file
/// byte-identical.
pub fn save(doc: &mut Document, path: &Path) -> Result<(), PersistError> {
    doc.stamp_saved(now_timestamp);
    write(doc, path)
}

pub fn read_text(path: &Path) -> Result<String, PersistError> {
    let raw = fs::read(path).map_err(|e| io_err(path, e))?;
    if is_gzip(path) {
        let mut s = String::new();
        GzDecoder::new(raw.as_slice()).read_to_string(&mut s).map_err(|e| io_err(path, e))?;
        Ok(s)
    } else {
        String::from_utf8(raw).map_err(|e| io_err(path, e))
    }
}

pub fn load(path: &Path) -> Result<Document, PersistError> {
    from_str(&read_text(path)?)
}

/// Rolling snapshots of a live document.
#[derive(Debug)]
pub struct Autosave {
    dir: PathBuf,
    keep: usize,
    last_revision: u64,
    next_seq: u64,
}

pub const DEFAULT_SNAPSHOTS: usize = 20;

impl Autosave {
    /// Snapshots go to `dir`, keeping the newest `keep`. Existing snapshots
    /// in `dir` count towards the ring.
    pub fn new(dir: impl Into<PathBuf>, keep: usize) -> Self {
        let dir = dir.into();
        let next_seq = list_snapshots(&dir).last().map_or(0, |(seq, _)| seq + 1);
        Self { dir, keep: keep.max(1), last_revision: 0, next_seq }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write a snapshot if `doc` changed since the last one (or since it was
    /// opened). Returns the snapshot path.
    pub fn tick(&mut self, doc: &Document) -> Result<Option<PathBuf>, PersistError> {
        if doc.revision() == self.last_revision {
            return Ok(None);
        }
        fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let path = self.dir.join(format!("snapshot-{stamp}-{:06}{EXTENSION}", self.next_seq));
        let mut copy = doc.clone();
        copy.stamp_saved(now_timestamp);
        write(&copy, &path)?;
        self.next_seq += 1;
        self.last_revision = doc.revision();
        let snapshots = list_snapshots(&self.dir);
        let excess = snapshots.len().saturating_sub(self.keep);
        for (_, old) in &snapshots[..excess] {
            fs::remove_file(old).map_err(|e| io_err(old, e))?;
        }
        Ok(Some(path))
    }
}

/// Snapshot files in `dir`, oldest first.
pub fn list_snapshots(dir: &Path) -> Vec<(u64, PathBuf)> {
    let Ok(entries) = fs::read_dir(dir) else { return Vec::new() };
    let mut out: Vec<(u64, PathBuf)> = entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let stem = name.strip_prefix("snapshot-")?.strip_suffix(EXTENSION)?;
            let seq = stem.rsplit('-').next()?.parse().ok()?;
            Some((seq, e.path()))
        })
        .collect();
    out.sort();
    out
}
