use loom_core::branching::ExpansionError;
use loom_core::persistence::PersistError;
use loom_core::tools::ToolError;
use loom_core::{DocError, NodeId, ProviderError};
use serde_json::{json, Value};

/// Error classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Document { message: String, nodes: Vec<NodeId> },
    Provider(String),
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError::Usage(m.into())
    }

    pub fn document(m: impl Into<String>) -> Self {
        CliError::Document { message: m.into(), nodes: Vec::new() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Document { .. } => 2,
            CliError::Provider(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Provider(m) => m,
            CliError::Document { message, .. } => message,
        }
    }

    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Usage(_) => "usage",
            CliError::Document { .. } => "document",
            CliError::Provider(_) => "provider",
        };
        let mut v = json!({ "error": kind, "message": self.message() });
        if let CliError::Document { nodes, .. } = self {
            if !nodes.is_empty() {
                v["nodes"] = json!(nodes);
            }
        }
        v
    }
}

impl From<DocError> for CliError {
    fn from(e: DocError) -> Self {
        CliError::document(e.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Document { nodes: e.offending_nodes(), message: e.to_string() }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        CliError::Provider(e.to_string())
    }
}

impl From<ToolError> for CliError {
    fn from(e: ToolError) -> Self {
        match e {
            ToolError::Provider(p) => p.into(),
            ToolError::Unbound(_) => CliError::Usage(e.to_string()),
            other => CliError::document(other.to_string()),
        }
    }
}

impl From<ExpansionError> for CliError {
    fn from(e: ExpansionError) -> Self {
        match e {
            ExpansionError::Provider(m) => CliError::Provider(m),
            other => CliError::document(other.to_string()),
        }
    }
}
