//! Whole-criterion checks. Each returns a one-line summary on success and
//! the first discrepancy on failure.

use std::collections::HashSet;
use std::time::Instant;

use loom_core::branching::adaptive_expand;
use loom_core::persistence;
use loom_core::provider::{NgramModel, TableModel, Tokenizer};
use loom_core::{BranchPolicy, Document, LanguageModel, NodeId, Scope, SearchScope};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::m1::{self, Limits};
use super::*;

pub type Check = Result<String, String>;

pub const ADAPTIVE_TIME_LIMIT_SECS: f64 = 5.0;
pub const TAUS_MILLI: [u32; 5] = [500, 800, 900, 990, 1000];
pub const CAPS: [Option<usize>; 3] = [Some(2), Some(3), None];
pub const MAX_DEPTHS: [usize; 4] = [1, 2, 3, 4];
pub const SEGMENT_BUDGETS: [usize; 3] = [1, 2, 4];
pub const PROMPTS: [&str; 4] = ["a", "ab", "b", "x"];
pub const NODE_BUDGETS: [usize; 2] = [5, 100_000];

pub const CHAPTER_DOCS: usize = 100;
pub const CHAPTER_MAX_NODES: usize = 1000;
pub const CHAPTER_MAX_CHAPTERS: usize = 30;
pub const FUZZ_MUTATIONS: usize = 10_000;
pub const SEARCH_DOC_NODES: usize = 1000;
pub const MEMORY_ENTRIES: usize = 100;

fn policy(tau: u32, cap: Option<usize>, segment: usize, depth: usize, nodes: usize) -> BranchPolicy {
    BranchPolicy {
        tau: tau as f64 / 1000.0,
        branch_cap: cap,
        segment_token_budget: segment,
        total_node_budget: nodes,
        max_depth: Some(depth),
        ..BranchPolicy::default()
    }
}

/// Runs every configuration of the sweep, handing each result to `f`.
fn sweep(
    mut f: impl FnMut(&str, Limits, usize, &Document, NodeId, &loom_core::ExpansionReport) -> Result<(), String>,
) -> Result<usize, String> {
    let model = TableModel::m1();
    let mut runs = 0;
    for prompt in PROMPTS {
        for tau in TAUS_MILLI {
            for cap in CAPS {
                for depth in MAX_DEPTHS {
                    for segment in SEGMENT_BUDGETS {
                        for nodes in NODE_BUDGETS {
                            let mut doc = Document::new(prompt);
                            let root = doc.root();
                            let p = policy(tau, cap, segment, depth, nodes);
                            let report = adaptive_expand(&model, prompt, root, &p, &mut doc);
                            if let Some(e) = &report.error {
                                return Err(format!("expansion failed: {e:?}"));
                            }
                            let limits = Limits { tau, cap, segment, max_depth: Some(depth) };
                            f(prompt, limits, nodes, &doc, root, &report)?;
                            runs += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(runs)
}

pub fn adaptive_oracle() -> Check {
    let t0 = Instant::now();
    let mut nodes_compared = 0;
    let runs = sweep(|prompt, limits, budget, doc, root, report| {
        let expected = m1::truncate_bfs(&m1::enumerate(prompt, limits), budget);
        let actual = m1::forest_from_doc(doc, root, &report.created);
        if expected != actual {
            return Err(format!("prompt {prompt:?} {limits:?} budget {budget}: expected {expected:?}, got {actual:?}"));
        }
        nodes_compared += m1::count(&expected);
        Ok(())
    })?;
    let secs = t0.elapsed().as_secs_f64();
    if secs >= ADAPTIVE_TIME_LIMIT_SECS {
        return Err(format!("{runs} configurations took {secs:.2}s (limit {ADAPTIVE_TIME_LIMIT_SECS}s)"));
    }
    Ok(format!("{runs} configurations, {nodes_compared} nodes identical, {secs:.2}s"))
}

pub fn no_branch_law() -> Check {
    let mut steps = 0;
    let mut nodes = 0;
    let runs = sweep(|_, limits, _, doc, root, report| {
        let tau = limits.tau as f64 / 1000.0;
        for s in &report.steps {
            steps += 1;
            if s.top_prob + loom_core::provider::MASS_EPSILON >= tau && (s.branched || s.k != 1) {
                return Err(format!("branched at top probability {} with tau {tau}", s.top_prob));
            }
        }
        // independently: every branch point (a node with several created
        // children) sits where the top token is not confident
        let created: HashSet<NodeId> = report.created.iter().copied().collect();
        for id in std::iter::once(root).chain(report.created.iter().copied()) {
            let kids = doc.node(id).unwrap().children().iter().filter(|c| created.contains(c)).count();
            let ctx = doc.read_view(id).unwrap();
            nodes += 1;
            if kids > 1 && m1::dist(&ctx)[0].1 >= limits.tau {
                return Err(format!("node {id} ({ctx:?}) branches {kids} ways although its top token is confident"));
            }
            if id != root && kids == 1 && report.skipped == 0 {
                return Err(format!("node {id} has a single created child"));
            }
        }
        Ok(())
    })?;
    Ok(format!("{runs} expansions, {steps} steps and {nodes} nodes without a confident branch"))
}

pub fn chapter_membership(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for i in 0..CHAPTER_DOCS {
        let n = rng.random_range(1..=CHAPTER_MAX_NODES);
        let chapters = rng.random_range(0..=CHAPTER_MAX_CHAPTERS);
        let doc = random_document(&mut rng, n, chapters);
        let expected = chapters_top_down(&doc);
        for id in doc.node_ids() {
            let got = doc.chapter_of(id).map_err(|e| e.to_string())?.map(|c| c.id.to_string());
            if got != expected[&id] {
                return Err(format!("document {i}, node {id}: chapter_of {got:?}, expected {:?}", expected[&id]));
            }
            checked += 1;
        }
    }
    Ok(format!("{CHAPTER_DOCS} documents, {checked} nodes agree"))
}

pub struct FuzzRun {
    pub docs: Vec<Document>,
    pub applied: usize,
    pub rejected: usize,
    pub split_merge_checked: usize,
}

fn has_child_cycle(doc: &Document) -> bool {
    // colour-marking DFS over child edges
    let mut state = std::collections::HashMap::new();
    fn visit(doc: &Document, n: NodeId, state: &mut std::collections::HashMap<NodeId, u8>) -> bool {
        state.insert(n, 1);
        for c in doc.node(n).unwrap().children() {
            match state.get(c) {
                Some(1) => return true,
                Some(_) => {}
                None => {
                    if visit(doc, *c, state) {
                        return true;
                    }
                }
            }
        }
        state.insert(n, 2);
        false
    }
    doc.node_ids().any(|n| !state.contains_key(&n) && visit(doc, n, &mut state))
}

/// Split every eligible node at a random offset and merge it back.
fn split_merge_all(doc: &Document, rng: &mut impl Rng) -> Result<usize, String> {
    let before = body(doc);
    let mut checked = 0;
    for id in doc.node_ids().collect::<Vec<_>>() {
        let len = doc.node(id).unwrap().char_len();
        if len < 2 {
            continue;
        }
        let offset = rng.random_range(1..len);
        let mut copy = doc.clone();
        let (_, lower) = copy.split_node(id, offset).map_err(|e| format!("split {id}@{offset}: {e}"))?;
        copy.validate().map_err(|v| format!("after split {id}@{offset}: {v:?}"))?;
        copy.merge_with_parent(lower).map_err(|e| format!("merge back {id}@{offset}: {e}"))?;
        if body(&copy) != before {
            return Err(format!("split/merge of {id} at {offset} is not the identity"));
        }
        checked += 1;
    }
    Ok(checked)
}

pub fn fuzz(seed: u64, total: usize) -> Result<FuzzRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = FuzzRun { docs: Vec::new(), applied: 0, rejected: 0, split_merge_checked: 0 };
    let per_doc = 1000.min(total);
    while run.applied < total {
        let mut doc = random_document(&mut rng, 40, 3);
        let target = (run.applied + per_doc).min(total);
        while run.applied < target {
            let m = random_mutation(&mut rng, &doc);
            let before = doc.clone();
            match doc.apply(m.clone()) {
                Ok(_) => {
                    run.applied += 1;
                    if let Err(v) = doc.validate() {
                        return Err(format!("after {m:?}: {v:?}"));
                    }
                    if run.applied.is_multiple_of(250) {
                        run.split_merge_checked += split_merge_all(&doc, &mut rng)?;
                        run.docs.push(doc.clone());
                    }
                }
                Err(_) => {
                    run.rejected += 1;
                    if doc != before {
                        return Err(format!("rejected {m:?} changed the document"));
                    }
                }
            }
        }
        run.docs.push(doc);
    }
    Ok(run)
}

pub fn topology_fuzz(run: &Result<FuzzRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    if run.applied < FUZZ_MUTATIONS {
        return Err(format!("only {} mutations applied", run.applied));
    }
    Ok(format!(
        "{} mutations applied ({} rejected atomically), invariants hold, {} split/merge identities",
        run.applied, run.rejected, run.split_merge_checked
    ))
}

pub fn read_view_law(run: &Result<FuzzRun, String>, seed: u64) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs: Vec<Document> = run.docs.clone();
    for _ in 0..5 {
        docs.push(random_document(&mut rng, 300, 5));
    }
    let mut nodes = 0;
    let mut cyclic = 0;
    for doc in &docs {
        if has_child_cycle(doc) {
            cyclic += 1;
        }
        let walked = read_views(doc);
        for n in doc.nodes() {
            let view = doc.read_view(n.id()).map_err(|e| e.to_string())?;
            let expected = match n.active_parent() {
                None => n.text().to_owned(),
                Some(p) => doc.read_view(p).map_err(|e| e.to_string())? + n.text(),
            };
            if view != expected || view != walked[&n.id()] {
                return Err(format!("read view of {} is {view:?}, expected {expected:?}", n.id()));
            }
            nodes += 1;
        }
    }
    if cyclic == 0 {
        return Err("no document with a child-edge cycle was exercised".into());
    }
    Ok(format!("{} documents ({cyclic} with child-edge cycles), {nodes} nodes", docs.len()))
}

pub const SEARCH_QUERIES: [&str; 9] = ["a", "ab", "dragon", "HÉLLO", "ß", "σοφ", "İ", "n b", "the dragon"];

pub fn search_equivalence(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = random_document(&mut rng, SEARCH_DOC_NODES, 10);
    let ids: Vec<NodeId> = doc.node_ids().collect();
    let mut scopes = vec![SearchScope::All];
    for _ in 0..15 {
        let n = *ids.choose(&mut rng).unwrap();
        scopes.extend([SearchScope::Subtree(n), SearchScope::Ancestry(n), SearchScope::Both(n)]);
    }
    let mut hits = 0;
    let mut queries = 0;
    for scope in &scopes {
        for q in SEARCH_QUERIES {
            for case in [false, true] {
                let got: Vec<(NodeId, usize, usize)> = doc
                    .search(q, *scope, case)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|m| (m.node, m.start, m.end))
                    .collect();
                let want = naive_search(&doc, q, *scope, case);
                if got != want {
                    return Err(format!(
                        "{q:?} in {scope} (case {case}): {} hits, naive scan {}",
                        got.len(),
                        want.len()
                    ));
                }
                hits += got.len();
                queries += 1;
            }
        }
    }
    // nested scopes
    let mut nested = 0;
    let set = |s: SearchScope, q: &str| -> HashSet<(NodeId, usize)> {
        doc.search(q, s, false).unwrap().into_iter().map(|m| (m.node, m.start)).collect()
    };
    for _ in 0..40 {
        let child = *ids.choose(&mut rng).unwrap();
        let Some(parent) = doc.node(child).unwrap().active_parent() else { continue };
        for q in ["a", "the"] {
            let all = set(SearchScope::All, q);
            let sub_c = set(SearchScope::Subtree(child), q);
            let sub_p = set(SearchScope::Subtree(parent), q);
            let anc_c = set(SearchScope::Ancestry(child), q);
            let anc_p = set(SearchScope::Ancestry(parent), q);
            let both_c = set(SearchScope::Both(child), q);
            let ok = sub_c.is_subset(&sub_p)
                && anc_p.is_subset(&anc_c)
                && sub_c.is_subset(&both_c)
                && anc_c.is_subset(&both_c)
                && both_c.is_subset(&all);
            if !ok {
                return Err(format!("nested scopes at {parent} > {child} are not monotone for {q:?}"));
            }
            nested += 1;
        }
    }
    Ok(format!(
        "{queries} queries over {} scopes ({hits} hits) match the naive scan; {nested} nested checks",
        scopes.len()
    ))
}

pub fn persistence_round_trip(run: &Result<FuzzRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, doc) in run.docs.iter().enumerate() {
        let text = persistence::to_canonical_string(doc);
        let back = persistence::from_str(&text).map_err(|e| format!("document {i}: {e}"))?;
        if &back != doc {
            return Err(format!("document {i} did not round-trip"));
        }
        if persistence::to_canonical_string(&back) != text {
            return Err(format!("document {i}: canonical form is not a fixed point"));
        }
        let path = dir.path().join(if i % 2 == 0 { "d.loom.json" } else { "d.loom.json.gz" });
        persistence::write(doc, &path).map_err(|e| e.to_string())?;
        let loaded = persistence::load(&path).map_err(|e| e.to_string())?;
        if &loaded != doc {
            return Err(format!("document {i} did not survive a file round trip"));
        }
    }
    // corruption: point a parent link at a node that does not exist
    let doc = &run.docs[0];
    let victim = doc.node_ids().find(|n| *n != doc.root()).ok_or("document has one node")?;
    let mut v = persistence::to_value(doc);
    let bad = "n999999";
    for node in v["nodes"].as_array_mut().unwrap() {
        if node["id"] == victim.to_string() {
            node["parents"].as_array_mut().unwrap().push(serde_json::json!(bad));
        }
    }
    match persistence::from_value(v) {
        Ok(_) => return Err("corrupted document was accepted".into()),
        Err(e) => {
            if !e.to_string().contains(bad) || !e.offending_nodes().contains(&victim) {
                return Err(format!("corruption reported without naming {victim} -> {bad}: {e}"));
            }
        }
    }
    Ok(format!(
        "{} documents round-trip structurally and byte-exactly; corruption names {victim} -> {bad}",
        run.docs.len()
    ))
}

const MEMORY_WORDS: &[&str] = &[
    "dragon", "lantern", "harbour", "queen", "mara", "tower", "river", "storm", "key", "silver", "orchard", "mirror",
    "winter", "ship", "oath", "crown", "fox", "bell", "ash", "salt", "the", "and", "of",
];

fn memory_text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(2..=8);
    (0..n).map(|_| *MEMORY_WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn memory_ranking(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = 0;
    let mut bundles = 0;
    let codepoint = TableModel::m1();
    let words = NgramModel::train("the dragon and the queen sail the river", 2, Tokenizer::Whitespace).unwrap();
    for round in 0..5 {
        let mut doc = random_document(&mut rng, 200, 4);
        let ids: Vec<NodeId> = doc.node_ids().collect();
        let mut saved = 0;
        while saved < MEMORY_ENTRIES {
            let scope =
                if rng.random_bool(0.5) { Scope::Global } else { Scope::Subtree(*ids.choose(&mut rng).unwrap()) };
            let keys = if rng.random_bool(0.3) {
                Some((0..rng.random_range(1..4)).map(|_| MEMORY_WORDS[rng.random_range(0..20)].to_owned()).collect())
            } else {
                None
            };
            if doc.save_memory(memory_text(&mut rng), keys, scope).is_ok() {
                saved += 1;
            }
        }
        // random documents already carry a few entries
        if doc.memory_entries().len() < MEMORY_ENTRIES {
            return Err(format!("round {round}: corpus too small"));
        }
        for _ in 0..50 {
            let at = *ids.choose(&mut rng).unwrap();
            let tail = memory_text(&mut rng);
            let k = rng.random_range(1..=10);
            let got: Vec<(String, f64)> = doc
                .retrieve(&tail, k, at)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|s| (s.entry.id.to_string(), s.score))
                .collect();
            let want = brute_rank(&doc, &tail, k, at);
            let same =
                got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() < 1e-9);
            if !same {
                return Err(format!("round {round}: retrieve({tail:?}, {k}, {at}) = {got:?}, brute force {want:?}"));
            }
            queries += 1;
        }
        for _ in 0..40 {
            let at = *ids.choose(&mut rng).unwrap();
            let budget = rng.random_range(16..400);
            let memory_k = rng.random_range(0..6);
            for model in [&codepoint as &dyn LanguageModel, &words] {
                let bundle = doc.build_context(at, budget, memory_k, model).map_err(|e| e.to_string())?;
                let used = model.count_tokens(&bundle.render());
                if used > budget || bundle.token_estimate > budget {
                    return Err(format!("context for {at} uses {used} tokens, budget {budget}"));
                }
                bundles += 1;
            }
        }
    }
    Ok(format!("{queries} retrievals equal the brute-force ranking; {bundles} bundles within budget"))
}
