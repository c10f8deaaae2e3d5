//! Independent oracles and random generators shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

pub mod checks;

use std::collections::{BTreeMap, HashMap, HashSet};

use loom_core::persistence;
use loom_core::{Document, Flag, Mutation, NodeId, Scope, SearchScope};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::Value;

/// Exact M1 arithmetic in thousandths.
pub mod m1 {
    use super::*;

    /// Next-token distribution after `ctx`, highest first, ties by token.
    pub fn dist(ctx: &str) -> Vec<(char, u32)> {
        if ctx.ends_with("ab") {
            vec![('c', 995), ('d', 5)]
        } else if ctx.ends_with('a') {
            vec![('b', 500), ('c', 300), ('d', 200)]
        } else if ctx.ends_with('b') {
            vec![('a', 600), ('c', 400)]
        } else {
            vec![('a', 500), ('b', 500)]
        }
    }

    /// Number of branches at `ctx`: the shortest prefix reaching `tau`
    /// (thousandths), capped.
    pub fn k(ctx: &str, tau: u32, cap: Option<usize>) -> usize {
        let d = dist(ctx);
        let mut sum = 0;
        let mut k = d.len();
        for (i, (_, p)) in d.iter().enumerate() {
            sum += p;
            if sum >= tau {
                k = i + 1;
                break;
            }
        }
        cap.map_or(k, |c| k.min(c))
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Tree {
        pub text: String,
        pub children: Vec<Tree>,
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Limits {
        pub tau: u32,
        pub cap: Option<usize>,
        pub segment: usize,
        pub max_depth: Option<usize>,
    }

    /// Enumerate the expansion below a node whose context is `ctx`. Each
    /// returned tree hangs directly from that node.
    pub fn enumerate(ctx: &str, limits: Limits) -> Vec<Tree> {
        grow(ctx.to_owned(), None, 1, limits)
    }

    fn grow(mut ctx: String, seed: Option<char>, depth: usize, l: Limits) -> Vec<Tree> {
        let mut seg = String::new();
        if let Some(c) = seed {
            seg.push(c);
            ctx.push(c);
        }
        loop {
            if seg.chars().count() >= l.segment {
                return vec![Tree { text: seg, children: vec![] }];
            }
            let k = k(&ctx, l.tau, l.cap);
            let d = dist(&ctx);
            if k == 1 {
                seg.push(d[0].0);
                ctx.push(d[0].0);
                continue;
            }
            let child_depth = if seg.is_empty() { depth } else { depth + 1 };
            if l.max_depth.is_some_and(|m| child_depth > m) {
                return vec![Tree { text: seg, children: vec![] }];
            }
            let kids: Vec<Tree> =
                d[..k].iter().flat_map(|(t, _)| grow(ctx.clone(), Some(*t), child_depth, l)).collect();
            return if seg.is_empty() { kids } else { vec![Tree { text: seg, children: kids }] };
        }
    }

    pub fn count(forest: &[Tree]) -> usize {
        forest.iter().map(|t| 1 + count(&t.children)).sum()
    }

    /// Keep the first `n` nodes of the forest in breadth-first order.
    pub fn truncate_bfs(forest: &[Tree], n: usize) -> Vec<Tree> {
        // number every node breadth-first, then rebuild keeping those < n
        let mut order: Vec<Vec<usize>> = Vec::new(); // paths
        let mut queue: std::collections::VecDeque<Vec<usize>> = (0..forest.len()).map(|i| vec![i]).collect();
        while let Some(path) = queue.pop_front() {
            let node = at(forest, &path);
            for i in 0..node.children.len() {
                let mut p = path.clone();
                p.push(i);
                queue.push_back(p);
            }
            order.push(path);
        }
        let keep: HashSet<Vec<usize>> = order.into_iter().take(n).collect();
        rebuild(forest, &mut Vec::new(), &keep)
    }

    fn at<'a>(forest: &'a [Tree], path: &[usize]) -> &'a Tree {
        let mut node = &forest[path[0]];
        for &i in &path[1..] {
            node = &node.children[i];
        }
        node
    }

    fn rebuild(forest: &[Tree], prefix: &mut Vec<usize>, keep: &HashSet<Vec<usize>>) -> Vec<Tree> {
        let mut out = Vec::new();
        for (i, t) in forest.iter().enumerate() {
            prefix.push(i);
            if keep.contains(prefix) {
                out.push(Tree { text: t.text.clone(), children: rebuild(&t.children, prefix, keep) });
            }
            prefix.pop();
        }
        out
    }

    /// The created part of `doc` below `start`, as a forest.
    pub fn forest_from_doc(doc: &Document, start: NodeId, created: &[NodeId]) -> Vec<Tree> {
        let created: HashSet<NodeId> = created.iter().copied().collect();
        fn build(doc: &Document, id: NodeId, created: &HashSet<NodeId>) -> Tree {
            let node = doc.node(id).unwrap();
            Tree {
                text: node.text().to_owned(),
                children: node
                    .children()
                    .iter()
                    .filter(|c| created.contains(c))
                    .map(|c| build(doc, *c, created))
                    .collect(),
            }
        }
        doc.node(start)
            .unwrap()
            .children()
            .iter()
            .filter(|c| created.contains(c))
            .map(|c| build(doc, *c, &created))
            .collect()
    }
}

/// Canonical JSON without the allocation counters and save timestamp.
pub fn body(doc: &Document) -> Value {
    let mut v = persistence::to_value(doc);
    let obj = v.as_object_mut().unwrap();
    obj.remove("ids");
    obj.remove("saved_at");
    v
}

const WORDS: &[&str] = &[
    "the",
    "dragon",
    "lantern",
    "sea",
    "héllo",
    "straße",
    "Mara",
    "queen",
    "ÅNGSTRÖM",
    "ab",
    "ba",
    "a",
    "b",
    "abab",
    "night",
    "İstanbul",
    "river",
    "ΣΟΦΙΑ",
    "storm",
    "key",
];

pub fn random_text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=4);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(WORDS.choose(rng).unwrap());
        s.push(' ');
    }
    s
}

/// A random valid document of `n` nodes with extra parents, child-edge
/// cycles, chapters and assorted annotations.
pub fn random_document(rng: &mut impl Rng, n: usize, chapters: usize) -> Document {
    let mut doc = Document::new(random_text(rng));
    let mut ids = vec![doc.root()];
    while ids.len() < n {
        let parent = *ids.choose(rng).unwrap();
        ids.push(doc.create_child(parent, random_text(rng)).unwrap());
    }
    // extra parents, some of them descendants (child-edge cycles)
    for _ in 0..n / 10 {
        let node = *ids.choose(rng).unwrap();
        let parent = *ids.choose(rng).unwrap();
        if node != doc.root() && node != parent {
            let _ = doc.reparent(node, &[parent], &[], None);
        }
    }
    // some active-parent switches
    for _ in 0..n / 20 {
        let node = *ids.choose(rng).unwrap();
        if node == doc.root() {
            continue;
        }
        let parents = doc.node(node).unwrap().parents().to_vec();
        let p = *parents.choose(rng).unwrap();
        let _ = doc.reparent(node, &[], &[], Some(p));
    }
    let mut roots: Vec<NodeId> = ids.clone();
    for _ in 0..chapters.min(n) {
        let i = rng.random_range(0..roots.len());
        let node = roots.swap_remove(i);
        doc.create_chapter(node, format!("Chapter {}", node)).unwrap();
    }
    for i in 0..n / 50 {
        let node = *ids.choose(rng).unwrap();
        doc.set_bookmark(format!("mark{i}"), node).unwrap();
        doc.tag(node, "motif").unwrap();
        doc.add_note(format!("note {i}"), random_text(rng), Scope::Subtree(node)).unwrap();
        let _ = doc.save_memory(random_text(rng), None, Scope::Subtree(node));
        doc.set_flag(node, Flag::Canonical, true).unwrap();
    }
    doc
}

/// One random topology mutation; not always valid.
pub fn random_mutation(rng: &mut impl Rng, doc: &Document) -> Mutation {
    let ids: Vec<NodeId> = doc.node_ids().collect();
    let non_root: Vec<NodeId> = ids.iter().copied().filter(|n| *n != doc.root()).collect();
    let any = *ids.choose(rng).unwrap();
    let roll = rng.random_range(0..100);
    let delete_bias = if doc.len() > 250 { 25 } else { 8 };
    if non_root.is_empty() || roll < 35 {
        return Mutation::CreateChild { parent: any, text: random_text(rng), gen_meta: None };
    }
    let node = *non_root.choose(rng).unwrap();
    let len = doc.node(node).unwrap().char_len();
    match roll {
        35..50 => Mutation::Split { node, offset: rng.random_range(0..=len) },
        50..65 => {
            // prefer eligible merges
            let eligible: Vec<NodeId> = non_root
                .iter()
                .copied()
                .filter(|n| {
                    let p = doc.node(*n).unwrap().parents();
                    p.len() == 1 && doc.node(p[0]).unwrap().children() == [*n]
                })
                .collect();
            Mutation::Merge { node: eligible.choose(rng).copied().unwrap_or(node) }
        }
        65..80 => {
            let other = *ids.choose(rng).unwrap();
            let parents = doc.node(node).unwrap().parents().to_vec();
            match rng.random_range(0..3) {
                0 => Mutation::Reparent { node, add: vec![other], remove: vec![], active: None },
                1 => Mutation::Reparent { node, add: vec![other], remove: vec![], active: Some(other) },
                _ => {
                    let drop = *parents.choose(rng).unwrap();
                    let keep = parents.iter().copied().find(|p| *p != drop);
                    Mutation::Reparent { node, add: vec![], remove: vec![drop], active: keep }
                }
            }
        }
        r if r < 80 + delete_bias => Mutation::Delete { node },
        _ => Mutation::SetText { node, text: random_text(rng) },
    }
}

/// Closest chapter root found by pushing chapters down the active tree.
pub fn chapters_top_down(doc: &Document) -> HashMap<NodeId, Option<String>> {
    let roots: HashMap<NodeId, String> = doc.chapters().iter().map(|c| (c.root_node, c.id.to_string())).collect();
    let mut kids: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for n in doc.nodes() {
        if let Some(p) = n.active_parent() {
            kids.entry(p).or_default().push(n.id());
        }
    }
    let mut out = HashMap::new();
    let mut stack = vec![(doc.root(), roots.get(&doc.root()).cloned())];
    while let Some((id, inherited)) = stack.pop() {
        let here = roots.get(&id).cloned().or(inherited);
        out.insert(id, here.clone());
        for k in kids.get(&id).into_iter().flatten() {
            stack.push((*k, here.clone()));
        }
    }
    out
}

fn fold(c: char) -> char {
    let l: Vec<char> = c.to_lowercase().collect();
    if l.len() == 1 {
        l[0]
    } else {
        c
    }
}

/// Breadth-first rank of every node in the active tree, computed from
/// (depth, sibling-index path).
fn bfs_rank(doc: &Document) -> HashMap<NodeId, (usize, Vec<usize>)> {
    let mut out = HashMap::new();
    for n in doc.nodes() {
        let mut path = Vec::new();
        let mut cur = n.id();
        let mut seen = 0;
        while let Some(p) = doc.node(cur).unwrap().active_parent() {
            let siblings: Vec<NodeId> = doc
                .node(p)
                .unwrap()
                .children()
                .iter()
                .copied()
                .filter(|c| doc.node(*c).unwrap().active_parent() == Some(p))
                .collect();
            path.push(siblings.iter().position(|s| *s == cur).unwrap());
            cur = p;
            seen += 1;
            assert!(seen <= doc.len(), "active cycle");
        }
        path.reverse();
        out.insert(n.id(), (path.len(), path));
    }
    out
}

/// Node set of a scope by explicit graph walks.
pub fn naive_scope(doc: &Document, scope: SearchScope) -> HashSet<NodeId> {
    let down = |start: NodeId| {
        let mut seen = HashSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for c in doc.node(n).unwrap().children() {
                if seen.insert(*c) {
                    stack.push(*c);
                }
            }
        }
        seen
    };
    let up = |start: NodeId| {
        let mut seen = HashSet::from([start]);
        let mut cur = start;
        while let Some(p) = doc.node(cur).unwrap().active_parent() {
            seen.insert(p);
            cur = p;
        }
        seen
    };
    match scope {
        SearchScope::All => doc.node_ids().collect(),
        SearchScope::Subtree(n) => down(n),
        SearchScope::Ancestry(n) => up(n),
        SearchScope::Both(n) => down(n).union(&up(n)).copied().collect(),
    }
}

/// (node, start, end) of every occurrence, in result order.
pub fn naive_search(
    doc: &Document,
    query: &str,
    scope: SearchScope,
    case_sensitive: bool,
) -> Vec<(NodeId, usize, usize)> {
    let f = |s: &str| -> Vec<char> { s.chars().map(|c| if case_sensitive { c } else { fold(c) }).collect() };
    let q = f(query);
    let rank = bfs_rank(doc);
    let mut hits = Vec::new();
    for id in naive_scope(doc, scope) {
        let t = f(doc.node(id).unwrap().text());
        for start in 0..t.len() {
            if t.len() - start >= q.len() && t[start..start + q.len()] == q[..] {
                hits.push((id, start, start + q.len()));
            }
        }
    }
    hits.sort_by(|a, b| rank[&a.0].cmp(&rank[&b.0]).then(a.1.cmp(&b.1)));
    hits
}

fn terms(s: &str) -> HashSet<String> {
    let mut out = HashSet::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.insert(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.insert(cur);
    }
    out
}

/// Memory ids ranked by the brute-force scorer.
pub fn brute_rank(doc: &Document, tail: &str, k: usize, at: NodeId) -> Vec<(String, f64)> {
    let entries = doc.memory_entries();
    let n = entries.len() as f64;
    let ctx = terms(tail);
    let mut ancestry = HashSet::new();
    let mut cur = Some(at);
    while let Some(c) = cur {
        ancestry.insert(c);
        cur = doc.node(c).unwrap().active_parent();
    }
    let mut scored: Vec<(f64, u64, String)> = Vec::new();
    for e in entries {
        let visible = match e.scope {
            Scope::Global => true,
            Scope::Subtree(s) => ancestry.contains(&s),
        };
        if !visible {
            continue;
        }
        let mut score = 0.0;
        for key in &e.keys {
            if ctx.contains(key) {
                let df = entries.iter().filter(|o| o.keys.contains(key)).count() as f64;
                score += (1.0 + n / df).ln();
            }
        }
        if score > 0.0 {
            scored.push((score, e.created_at, e.id.to_string()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    scored.into_iter().take(k).map(|(s, _, id)| (id, s)).collect()
}

/// Every node's read view, built by walking active parents.
pub fn read_views(doc: &Document) -> BTreeMap<NodeId, String> {
    doc.node_ids()
        .map(|id| {
            let mut parts = Vec::new();
            let mut cur = Some(id);
            while let Some(c) = cur {
                let node = doc.node(c).unwrap();
                parts.push(node.text().to_owned());
                cur = node.active_parent();
            }
            parts.reverse();
            (id, parts.concat())
        })
        .collect()
}
