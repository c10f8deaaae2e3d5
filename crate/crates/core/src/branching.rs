//! Growing the multiverse: sibling generation, fixed-interval trees and
//! adaptive branching.
//!
//! Adaptive expansion walks the model token by token. Where the top token
//! alone reaches the cumulative threshold `tau` the text grows in place;
//! where the mass is spread the current segment is closed and one child is
//! opened per top token. Branches are expanded breadth-first and each branch
//! produces at most one node, so the node budget truncates reproducibly.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::DocError;
use crate::graph::{Document, GenMeta, Result};
use crate::ids::NodeId;
use crate::provider::sampling::{find_stop, rng_for, sample_segment, sample_token};
use crate::provider::{FinishReason, GenerationParams, LanguageModel, ProviderError, TokenLogprob, TokenProb};

/// Where the engine puts the nodes it creates.
pub trait NodeSink {
    fn create(&mut self, parent: NodeId, text: String, meta: GenMeta) -> Result<NodeId, ExpansionError>;

    /// Polled between steps; returning true stops the expansion.
    fn cancelled(&self) -> bool {
        false
    }
}

impl NodeSink for Document {
    fn create(&mut self, parent: NodeId, text: String, meta: GenMeta) -> Result<NodeId, ExpansionError> {
        Ok(self.create_generated_child(parent, text, meta)?)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum ExpansionError {
    #[error("provider: {0}")]
    Provider(String),
    #[error("document: {0}")]
    Document(String),
    #[error("cancelled")]
    Cancelled,
}

impl From<ProviderError> for ExpansionError {
    fn from(e: ProviderError) -> Self {
        ExpansionError::Provider(e.to_string())
    }
}

impl From<DocError> for ExpansionError {
    fn from(e: DocError) -> Self {
        ExpansionError::Document(e.to_string())
    }
}

/// How branch tokens are chosen at a divergent point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// The top-k tokens of the distribution.
    #[default]
    TopK,
    /// Tokens sampled without replacement (using the policy's sampling
    /// parameters) until their mass reaches `tau`.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchPolicy {
    pub tau: f64,
    /// Maximum children per branch point; `None` is unbounded.
    pub branch_cap: Option<usize>,
    pub segment_token_budget: usize,
    pub total_node_budget: usize,
    /// Maximum depth of created nodes below the start node.
    pub max_depth: Option<usize>,
    pub mode: SelectionMode,
    pub params: GenerationParams,
}

impl Default for BranchPolicy {
    fn default() -> Self {
        Self {
            tau: 0.9,
            branch_cap: Some(3),
            segment_token_budget: 32,
            total_node_budget: 20,
            max_depth: None,
            mode: SelectionMode::TopK,
            params: GenerationParams::default(),
        }
    }
}

impl BranchPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DocError::Invalid(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.branch_cap == Some(0) {
            return bad("branch_cap must be >= 1".into());
        }
        if self.segment_token_budget == 0 {
            return bad("segment_token_budget must be >= 1".into());
        }
        if self.total_node_budget == 0 {
            return bad("total_node_budget must be >= 1".into());
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be >= 1".into());
        }
        self.params.validate().map_err(|e| DocError::Invalid(e.to_string()))
    }
}

/// Why a segment (or a pending branch) stopped growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Closed at a divergent point; its children continue it.
    Branched,
    SegmentBudget,
    NodeBudget,
    DepthBudget,
    StopSequence,
    DeadEnd,
}

/// One token decision taken by adaptive expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Node the branch hangs from.
    pub parent: NodeId,
    pub top_prob: f64,
    /// Number of tokens selected at this point.
    pub k: usize,
    pub branched: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    /// Nodes in creation order.
    pub created: Vec<NodeId>,
    /// Children opened at each branch point, keyed by the node they hang from.
    pub branch_factors: BTreeMap<NodeId, usize>,
    pub stops: Vec<(NodeId, StopReason)>,
    /// Branches dropped because the node budget ran out.
    pub skipped: usize,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<Step>,
    /// Set when expansion ended early; everything created before stays.
    pub error: Option<ExpansionError>,
}

struct Branch {
    parent: NodeId,
    /// Depth the branch's node will have below the start node.
    depth: usize,
    context: String,
    seed: Option<(String, f64)>,
}

fn finish_segment(
    sink: &mut dyn NodeSink,
    report: &mut ExpansionReport,
    meta: &GenMeta,
    parent: NodeId,
    tokens: Vec<TokenLogprob>,
    reason: StopReason,
) -> Result<Option<NodeId>, ExpansionError> {
    let text: String = tokens.iter().map(|t| t.token.as_str()).collect();
    if text.is_empty() {
        return Ok(None);
    }
    let id = sink.create(parent, text, GenMeta { tokens, ..meta.clone() })?;
    report.created.push(id);
    report.stops.push((id, reason));
    Ok(Some(id))
}

/// Pick the branch tokens at one step.
fn select(
    dist: &crate::provider::TokenDistribution,
    policy: &BranchPolicy,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<TokenProb> {
    let cap = policy.branch_cap.unwrap_or(usize::MAX);
    match policy.mode {
        SelectionMode::TopK => {
            let k = dist.prefix_reaching(policy.tau).min(cap);
            dist.entries()[..k].to_vec()
        }
        SelectionMode::Sample => {
            let mut picked: Vec<TokenProb> = Vec::new();
            let mut exclude = Vec::new();
            let mut mass = 0.0;
            while picked.len() < cap && mass + crate::provider::MASS_EPSILON < policy.tau {
                let Some(t) = sample_token(dist, &policy.params, rng, &exclude) else { break };
                mass += t.prob;
                exclude.push(t.token.clone());
                picked.push(t.clone());
            }
            picked
        }
    }
}

/// Adaptive expansion from `start`, whose full generation context is `context`.
pub fn adaptive_expand(
    model: &dyn LanguageModel,
    context: &str,
    start: NodeId,
    policy: &BranchPolicy,
    sink: &mut dyn NodeSink,
) -> ExpansionReport {
    let mut report = ExpansionReport::default();
    if let Err(e) = run_adaptive(model, context, start, policy, sink, &mut report) {
        report.error = Some(e);
    }
    report
}

fn run_adaptive(
    model: &dyn LanguageModel,
    context: &str,
    start: NodeId,
    policy: &BranchPolicy,
    sink: &mut dyn NodeSink,
    report: &mut ExpansionReport,
) -> Result<(), ExpansionError> {
    let meta = GenMeta { provider: model.name(), params: policy.params.clone(), tokens: Vec::new() };
    let mut rng = rng_for(policy.params.rng_seed);
    let top_k = policy.branch_cap.unwrap_or(usize::MAX);
    let mut queue = VecDeque::from([Branch { parent: start, depth: 1, context: context.to_owned(), seed: None }]);

    while let Some(branch) = queue.pop_front() {
        if report.created.len() >= policy.total_node_budget {
            report.skipped = queue.len() + 1;
            report.notes.push(format!("node budget of {} reached", policy.total_node_budget));
            break;
        }
        let Branch { parent, depth, mut context, seed } = branch;
        let mut tokens: Vec<TokenLogprob> = Vec::new();
        if let Some((fragment, prob)) = seed {
            context.push_str(&fragment);
            tokens.push(TokenLogprob::new(fragment, prob.ln()));
        }
        let mut text_len = tokens.iter().map(|t| t.token.len()).sum::<usize>();

        let reason = loop {
            if sink.cancelled() {
                finish_segment(sink, report, &meta, parent, tokens, StopReason::SegmentBudget)?;
                return Err(ExpansionError::Cancelled);
            }
            if !policy.params.stop.is_empty() {
                let text: String = tokens.iter().map(|t| t.token.as_str()).collect();
                if let Some(cut) = find_stop(&text, &policy.params.stop) {
                    truncate_tokens(&mut tokens, cut);
                    break StopReason::StopSequence;
                }
            }
            if tokens.len() >= policy.segment_token_budget {
                break StopReason::SegmentBudget;
            }
            let dist = match model.next_distribution(&context, top_k) {
                Ok(d) => d,
                Err(e) => {
                    finish_segment(sink, report, &meta, parent, tokens, StopReason::DeadEnd)?;
                    return Err(e.into());
                }
            };
            let chosen = select(&dist, policy, &mut rng);
            let Some(first) = chosen.first() else { break StopReason::DeadEnd };
            let branched = chosen.len() > 1;
            report.steps.push(Step { parent, top_prob: dist.top().map_or(0.0, |t| t.prob), k: chosen.len(), branched });
            if !branched {
                let fragment = model.fragment(&context, &first.token);
                context.push_str(&fragment);
                text_len += fragment.len();
                tokens.push(TokenLogprob::new(fragment, first.prob.ln()));
                continue;
            }

            // divergent point: the segment closes before the divergent token
            let has_segment = text_len > 0;
            let child_depth = if has_segment { depth + 1 } else { depth };
            if policy.max_depth.is_some_and(|max| child_depth > max) {
                break StopReason::DepthBudget;
            }
            let hang_from = if has_segment {
                finish_segment(sink, report, &meta, parent, tokens, StopReason::Branched)?
                    .expect("segment is non-empty")
            } else {
                parent
            };
            report.branch_factors.insert(hang_from, chosen.len());
            for t in chosen {
                let fragment = model.fragment(&context, &t.token);
                queue.push_back(Branch {
                    parent: hang_from,
                    depth: child_depth,
                    context: context.clone(),
                    seed: Some((fragment, t.prob)),
                });
            }
            tokens = Vec::new();
            break StopReason::Branched;
        };
        if reason != StopReason::Branched {
            if tokens.is_empty() {
                report.notes.push(format!("branch under {parent} ended empty ({reason:?})"));
            }
            finish_segment(sink, report, &meta, parent, tokens, reason)?;
        }
    }
    Ok(())
}

fn truncate_tokens(tokens: &mut Vec<TokenLogprob>, cut: usize) {
    let mut acc = 0;
    let mut keep = 0;
    for t in tokens.iter_mut() {
        if acc >= cut {
            break;
        }
        if acc + t.token.len() > cut {
            t.token.truncate(cut - acc);
        }
        acc += t.token.len();
        keep += 1;
    }
    tokens.truncate(keep);
}

/// Parameters of the fixed-interval baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedInterval {
    pub n_tokens: usize,
    pub branch_factor: usize,
    pub depth: usize,
}

impl FixedInterval {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.branch_factor == 0 || self.depth == 0 {
            return Err(DocError::Invalid("n_tokens, branch_factor and depth must be >= 1".into()));
        }
        Ok(())
    }
}

fn seeded(params: &GenerationParams, offset: usize) -> GenerationParams {
    GenerationParams { rng_seed: params.rng_seed.map(|s| s.wrapping_add(offset as u64)), ..params.clone() }
}

/// A `branch_factor`-ary tree of `depth` levels under `start`, every edge a
/// segment of `n_tokens` tokens. Siblings start with distinct tokens; when
/// the support runs out fewer siblings are made. Sibling `j` samples with
/// seed `rng_seed + j`.
pub fn fixed_interval_expand(
    model: &dyn LanguageModel,
    context: &str,
    start: NodeId,
    shape: FixedInterval,
    params: &GenerationParams,
    sink: &mut dyn NodeSink,
) -> ExpansionReport {
    let mut report = ExpansionReport::default();
    if let Err(e) = run_fixed(model, context, start, shape, params, sink, &mut report) {
        report.error = Some(e);
    }
    report
}

fn run_fixed(
    model: &dyn LanguageModel,
    context: &str,
    start: NodeId,
    shape: FixedInterval,
    params: &GenerationParams,
    sink: &mut dyn NodeSink,
    report: &mut ExpansionReport,
) -> Result<(), ExpansionError> {
    params.validate()?;
    let mut level = vec![(start, context.to_owned())];
    for _ in 0..shape.depth {
        let mut next = Vec::new();
        for (parent, ctx) in level {
            let mut firsts: Vec<String> = Vec::new();
            for j in 0..shape.branch_factor {
                if sink.cancelled() {
                    return Err(ExpansionError::Cancelled);
                }
                let p = GenerationParams { max_tokens: shape.n_tokens, ..seeded(params, j) };
                let out = if firsts.is_empty() {
                    model.complete(&ctx, &p)?
                } else {
                    let mut rng = rng_for(p.rng_seed);
                    sample_segment(model, &ctx, &p, &mut rng, &firsts, shape.n_tokens)?
                };
                let Some(first) = out.tokens.first() else {
                    report.notes.push(format!(
                        "dead end: support exhausted under {parent} after {j} of {} children",
                        shape.branch_factor
                    ));
                    break;
                };
                firsts.push(first.token.clone());
                let reason = match out.finish_reason {
                    FinishReason::Stop => StopReason::StopSequence,
                    FinishReason::DeadEnd => StopReason::DeadEnd,
                    _ => StopReason::SegmentBudget,
                };
                let meta = GenMeta { provider: model.name(), params: p.clone(), tokens: out.tokens };
                let id = sink.create(parent, out.text.clone(), meta)?;
                report.created.push(id);
                report.stops.push((id, reason));
                if reason == StopReason::SegmentBudget {
                    next.push((id, format!("{ctx}{}", out.text)));
                }
            }
            let made = firsts.len();
            if made > 0 {
                report.branch_factors.insert(parent, made);
            }
        }
        level = next;
    }
    Ok(())
}

/// `n` independent completions of `context` as children of `node`. Child
/// `i` uses seed `rng_seed + i`.
pub fn generate_siblings(
    model: &dyn LanguageModel,
    context: &str,
    node: NodeId,
    n: usize,
    params: &GenerationParams,
    sink: &mut dyn NodeSink,
) -> ExpansionReport {
    let mut report = ExpansionReport::default();
    let result = (|| {
        params.validate()?;
        for i in 0..n {
            if sink.cancelled() {
                return Err(ExpansionError::Cancelled);
            }
            let p = seeded(params, i);
            let out = model.complete(context, &p)?;
            if out.text.is_empty() {
                report.notes.push(format!("completion {i} was empty"));
                continue;
            }
            let reason = match out.finish_reason {
                FinishReason::Stop => StopReason::StopSequence,
                FinishReason::DeadEnd => StopReason::DeadEnd,
                _ => StopReason::SegmentBudget,
            };
            let meta = GenMeta { provider: model.name(), params: p, tokens: out.tokens };
            let id = sink.create(node, out.text, meta)?;
            report.created.push(id);
            report.stops.push((id, reason));
        }
        Ok(())
    })();
    if let Err(e) = result {
        report.error = Some(e);
    }
    if !report.created.is_empty() {
        report.branch_factors.insert(node, report.created.len());
    }
    report
}

impl Document {
    pub fn generate_siblings(
        &mut self,
        node: NodeId,
        n: usize,
        params: &GenerationParams,
        model: &dyn LanguageModel,
    ) -> Result<ExpansionReport> {
        if n == 0 {
            return Err(DocError::Invalid("n must be >= 1".into()));
        }
        let context = self.default_context(node, model)?.render();
        Ok(generate_siblings(model, &context, node, n, params, self))
    }

    pub fn adaptive_expand(
        &mut self,
        node: NodeId,
        policy: &BranchPolicy,
        model: &dyn LanguageModel,
    ) -> Result<ExpansionReport> {
        policy.validate()?;
        let context = self.default_context(node, model)?.render();
        Ok(adaptive_expand(model, &context, node, policy, self))
    }

    pub fn fixed_interval_expand(
        &mut self,
        node: NodeId,
        shape: FixedInterval,
        params: &GenerationParams,
        model: &dyn LanguageModel,
    ) -> Result<ExpansionReport> {
        shape.validate()?;
        let context = self.default_context(node, model)?.render();
        Ok(fixed_interval_expand(model, &context, node, shape, params, self))
    }
}

/// Nodes created by a report, grouped by the node they hang from.
pub fn created_children(doc: &Document, report: &ExpansionReport) -> BTreeMap<NodeId, Vec<NodeId>> {
    let created: HashSet<NodeId> = report.created.iter().copied().collect();
    let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &id in &report.created {
        if let Ok(node) = doc.node(id) {
            for &p in node.parents() {
                out.entry(p).or_default().push(id);
            }
        }
    }
    out.retain(|_, kids| kids.iter().all(|k| created.contains(k)));
    out
}
