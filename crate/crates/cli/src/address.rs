//! Node references given on the command line.

use loom_core::{Document, NodeId};

use crate::error::CliError;

/// Resolve `reference` as, in order: an exact node id, a bookmark name,
/// `root` (any case), or a prefix shared by exactly one node id.
pub fn resolve(doc: &Document, reference: &str) -> Result<NodeId, CliError> {
    if let Ok(id) = reference.parse::<NodeId>() {
        if doc.contains(id) {
            return Ok(id);
        }
    }
    if let Ok(id) = doc.resolve_bookmark(reference) {
        return Ok(id);
    }
    if reference.eq_ignore_ascii_case("root") {
        return Ok(doc.root());
    }
    if reference.is_empty() {
        return Err(CliError::usage("empty node reference"));
    }
    let mut hits: Vec<NodeId> = doc.node_ids().filter(|id| id.to_string().starts_with(reference)).collect();
    hits.sort();
    match hits.as_slice() {
        [one] => Ok(*one),
        [] => Err(CliError::document(format!("no node, bookmark or id prefix matches {reference:?}"))),
        many => {
            let shown: Vec<String> = many.iter().take(5).map(ToString::to_string).collect();
            let more = if many.len() > 5 { ", ..." } else { "" };
            Err(CliError::usage(format!(
                "{reference:?} is ambiguous: {} nodes match ({}{more})",
                many.len(),
                shown.join(", ")
            )))
        }
    }
}
