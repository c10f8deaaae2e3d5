//! Deterministic workloads shared by the benchmarks.

use loom_core::{Document, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] =
    ["the", "dragon", "slept", "under", "a", "hill", "of", "lanterns", "while", "rain", "fell", "softly"];

/// A random tree of `nodes` nodes: every node hangs from a random earlier
/// one, with a chapter on every fiftieth node.
pub fn random_document(nodes: usize, seed: u64) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut doc = Document::new("Once upon a time ");
    let mut ids: Vec<NodeId> = vec![doc.root()];
    for i in 1..nodes {
        let parent = ids[rng.random_range(0..ids.len())];
        let len = rng.random_range(3..12);
        let text: String = (0..len).map(|_| format!("{} ", WORDS[rng.random_range(0..WORDS.len())])).collect();
        let id = doc.create_child(parent, text).expect("parent exists");
        if i % 50 == 0 {
            doc.create_chapter(id, format!("Chapter {}", i / 50)).expect("fresh node");
        }
        ids.push(id);
    }
    doc
}
