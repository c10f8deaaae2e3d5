//! Prompt-template writing tools and path summarization.
//!
//! A template body may use `{context}`, `{summary}`, `{selection}` and
//! `{var:NAME}`; `{{` and `}}` stand for literal braces. Template packs are
//! plain text:
//!
//! ```text
//! ---
//! name: sensory-description
//! output: return-only
//! temperature: 0.8
//! ---
//! Describe the {var:OBJECT} using all five senses:
//! {context}
//! ```
//!
//! Front matter keys are `name`, `output`, `temperature`, `top_p`,
//! `max_tokens`, `seed` and `stop` (repeatable, with `\n`, `\t` and `\\`
//! escapes). The body runs to the next `---` line.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotations::Scope;
use crate::error::DocError;
use crate::graph::{Document, GenMeta};
use crate::ids::NodeId;
use crate::memory::suffix_within;
use crate::mutation::Mutation;
use crate::provider::{GenerationParams, LanguageModel, ProviderError};

const BUILTIN_PACK: &str = include_str!("../templates/builtin.txt");

/// Target length of `{summary}` when the caller does not supply one.
pub const SUMMARY_TARGET_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {0:?} already exists")]
    DuplicateTemplate(String),
    #[error("placeholder {{var:{0}}} is not bound")]
    Unbound(String),
    #[error("malformed template: {0}")]
    Malformed(String),
    #[error("malformed template pack, line {line}: {message}")]
    Pack { line: usize, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Document(#[from] DocError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHandling {
    InsertAsChild,
    FloatingNote,
    #[default]
    ReturnOnly,
}

impl OutputHandling {
    fn as_str(self) -> &'static str {
        match self {
            OutputHandling::InsertAsChild => "insert-as-child",
            OutputHandling::FloatingNote => "floating-note",
            OutputHandling::ReturnOnly => "return-only",
        }
    }
}

impl std::str::FromStr for OutputHandling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "insert-as-child" => Ok(OutputHandling::InsertAsChild),
            "floating-note" => Ok(OutputHandling::FloatingNote),
            "return-only" => Ok(OutputHandling::ReturnOnly),
            other => Err(format!("unknown output handling {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Placeholder {
    Context,
    Summary,
    Selection,
    Var(String),
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placeholder::Context => f.write_str("{context}"),
            Placeholder::Summary => f.write_str("{summary}"),
            Placeholder::Selection => f.write_str("{selection}"),
            Placeholder::Var(name) => write!(f, "{{var:{name}}}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

fn parse_body(body: &str) -> Result<Vec<Segment>, ToolError> {
    let mut out = Vec::new();
    let mut literal = String::new();
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|p| p.1) == Some('{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek().map(|p| p.1) == Some('}') => {
                chars.next();
                literal.push('}');
            }
            '}' => return Err(ToolError::Malformed(format!("unmatched '}}' at byte {i}"))),
            '{' => {
                let rest = &body[i + 1..];
                let end = rest.find('}').ok_or_else(|| ToolError::Malformed(format!("unclosed '{{' at byte {i}")))?;
                let inner = &rest[..end];
                let slot = match inner {
                    "context" => Placeholder::Context,
                    "summary" => Placeholder::Summary,
                    "selection" => Placeholder::Selection,
                    _ => match inner.strip_prefix("var:") {
                        Some(name) if is_var_name(name) => Placeholder::Var(name.to_owned()),
                        _ => return Err(ToolError::Malformed(format!("unknown placeholder {{{inner}}}"))),
                    },
                };
                if !literal.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                out.push(Segment::Slot(slot));
                while chars.peek().is_some_and(|(j, _)| *j <= i + 1 + end) {
                    chars.next();
                }
            }
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        out.push(Segment::Literal(literal));
    }
    Ok(out)
}

fn is_var_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default)]
    pub output: OutputHandling,
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        body: impl Into<String>,
        params: GenerationParams,
        output: OutputHandling,
    ) -> Result<Self, ToolError> {
        let t = Self { name: name.into(), body: body.into(), params, output };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ToolError> {
        if self.name.trim().is_empty() || self.name.contains('\n') {
            return Err(ToolError::Malformed("template name must be a non-empty single line".into()));
        }
        if self.body.lines().any(|l| l == "---") {
            return Err(ToolError::Malformed("template body may not contain a '---' line".into()));
        }
        parse_body(&self.body)?;
        self.params.validate()?;
        Ok(())
    }

    /// Distinct placeholders in order of first use.
    pub fn placeholders(&self) -> Result<Vec<Placeholder>, ToolError> {
        let mut out: Vec<Placeholder> = Vec::new();
        for seg in parse_body(&self.body)? {
            if let Segment::Slot(p) = seg {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    /// Substitute every placeholder in one pass; substituted text is never
    /// scanned again.
    pub fn render(&self, lookup: impl Fn(&Placeholder) -> Option<String>) -> Result<String, ToolError> {
        let mut out = String::new();
        for seg in parse_body(&self.body)? {
            match seg {
                Segment::Literal(s) => out.push_str(&s),
                Segment::Slot(p) => match lookup(&p) {
                    Some(v) => out.push_str(&v),
                    None => {
                        let name = match p {
                            Placeholder::Var(n) => n,
                            other => other.to_string(),
                        };
                        return Err(ToolError::Unbound(name));
                    }
                },
            }
        }
        Ok(out)
    }
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

/// Parse a template pack.
pub fn parse_pack(text: &str) -> Result<Vec<PromptTemplate>, ToolError> {
    let err = |line: usize, message: String| ToolError::Pack { line, message };
    let lines: Vec<&str> = text.lines().collect();
    let mut out: Vec<PromptTemplate> = Vec::new();
    let mut i = 0;
    while i < lines.len() && lines[i].trim().is_empty() {
        i += 1;
    }
    while i < lines.len() {
        if lines[i] != "---" {
            return Err(err(i + 1, "expected '---'".into()));
        }
        i += 1;
        let mut name = None;
        let mut output = OutputHandling::default();
        let mut params = GenerationParams::default();
        loop {
            let Some(line) = lines.get(i) else {
                return Err(err(i, "front matter is not closed".into()));
            };
            i += 1;
            if *line == "---" {
                break;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once(':').ok_or_else(|| err(i, format!("expected 'key: value', got {line:?}")))?;
            let value = value.strip_prefix(' ').unwrap_or(value);
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| err(i, format!("bad number {v:?}")));
            let int = |v: &str| v.trim().parse::<u64>().map_err(|_| err(i, format!("bad integer {v:?}")));
            match key.trim() {
                "name" => name = Some(value.trim().to_owned()),
                "output" => output = value.trim().parse().map_err(|m| err(i, m))?,
                "temperature" => params.temperature = num(value)?,
                "top_p" => params.top_p = num(value)?,
                "max_tokens" => params.max_tokens = int(value)? as usize,
                "seed" => params.rng_seed = Some(int(value)?),
                "stop" => params.stop.push(unescape(value)),
                other => return Err(err(i, format!("unknown key {other:?}"))),
            }
        }
        let start = i;
        while i < lines.len() && lines[i] != "---" {
            i += 1;
        }
        let body: String = lines[start..i].iter().map(|l| format!("{l}\n")).collect();
        let name = name.ok_or_else(|| err(start, "template has no name".into()))?;
        if out.iter().any(|t| t.name == name) {
            return Err(ToolError::DuplicateTemplate(name));
        }
        out.push(PromptTemplate::new(name, body, params, output)?);
    }
    Ok(out)
}

/// Inverse of [`parse_pack`] for bodies that end in a newline.
pub fn write_pack(templates: &[PromptTemplate]) -> String {
    let mut out = String::new();
    let defaults = GenerationParams::default();
    for t in templates {
        out.push_str("---\n");
        out.push_str(&format!("name: {}\noutput: {}\n", t.name, t.output.as_str()));
        if t.params.temperature != defaults.temperature {
            out.push_str(&format!("temperature: {}\n", t.params.temperature));
        }
        if t.params.top_p != defaults.top_p {
            out.push_str(&format!("top_p: {}\n", t.params.top_p));
        }
        if t.params.max_tokens != defaults.max_tokens {
            out.push_str(&format!("max_tokens: {}\n", t.params.max_tokens));
        }
        if let Some(seed) = t.params.rng_seed {
            out.push_str(&format!("seed: {seed}\n"));
        }
        for s in &t.params.stop {
            out.push_str(&format!("stop: {}\n", escape(s)));
        }
        out.push_str("---\n");
        out.push_str(&t.body);
        if !t.body.ends_with('\n') && !t.body.is_empty() {
            out.push('\n');
        }
    }
    out
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    parse_pack(BUILTIN_PACK).expect("built-in pack is well formed")
}

/// A rendered tool invocation, ready to send to the provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedTool {
    pub template: PromptTemplate,
    pub node: NodeId,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRun {
    pub prompt: String,
    pub text: String,
    pub output: OutputHandling,
    /// Node or note created by the output handling, if any.
    pub created: Option<String>,
}

impl PreparedTool {
    pub fn execute(&self, model: &dyn LanguageModel) -> Result<String, ToolError> {
        Ok(model.complete(&self.prompt, &self.template.params)?.text)
    }

    /// The graph change implied by the template's output handling.
    pub fn effect(&self, text: &str, provider: &str) -> Option<Mutation> {
        if text.is_empty() {
            return None;
        }
        match self.template.output {
            OutputHandling::InsertAsChild => Some(Mutation::CreateChild {
                parent: self.node,
                text: text.to_owned(),
                gen_meta: Some(GenMeta {
                    provider: provider.to_owned(),
                    params: self.template.params.clone(),
                    tokens: Vec::new(),
                }),
            }),
            OutputHandling::FloatingNote => Some(Mutation::AddNote {
                title: self.template.name.clone(),
                body: text.to_owned(),
                scope: Scope::Subtree(self.node),
            }),
            OutputHandling::ReturnOnly => None,
        }
    }
}

/// Result of [`Document::summarize_path`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub calls: usize,
    pub passes: usize,
    /// The provider failed part way; `text` holds what was produced.
    pub partial: bool,
}

/// Marker appended to a summary cut short by a provider failure.
pub const PARTIAL_MARKER: &str = "[summary incomplete]";

const EXEMPLARS: &[(&str, &str)] = &[
    (
        "The rain had not stopped for three days. Mara kept the lamp lit in the window, waiting for a ship that everyone else in the village had given up on.",
        "Mara waits out a long storm for a ship the village believes lost.",
    ),
    (
        "At the council the old general argued for retreat, but the young queen overruled him and ordered the army to hold the bridge until dawn.",
        "The queen overrules her general and orders the army to hold the bridge.",
    ),
];

pub fn summary_prompt(passage: &str) -> String {
    let mut out = String::from("Summarize each passage in one or two sentences.\n\n");
    for (p, s) in EXEMPLARS {
        out.push_str(&format!("Passage: {p}\nSummary: {s}\n\n"));
    }
    out.push_str(&format!("Passage: {}\nSummary:", passage.trim()));
    out
}

/// Longest prefix of `text` within `budget` tokens (at least one character).
fn prefix_within(text: &str, budget: usize, count: impl Fn(&str) -> usize) -> &str {
    let ends: Vec<usize> = text.char_indices().map(|(i, _)| i).skip(1).chain([text.len()]).collect();
    let (mut lo, mut hi) = (0, ends.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if count(&text[..ends[mid]]) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    &text[..ends[lo]]
}

fn chunk(text: &str, size: usize, count: impl Fn(&str) -> usize + Copy) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let piece = prefix_within(rest, size, count);
        out.push(piece);
        rest = &rest[piece.len()..];
    }
    out
}

impl Document {
    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn template(&self, name: &str) -> Result<&PromptTemplate, ToolError> {
        self.templates.iter().find(|t| t.name == name).ok_or_else(|| ToolError::UnknownTemplate(name.to_owned()))
    }

    /// Add a template, or replace the one with the same name.
    pub fn upsert_template(&mut self, template: PromptTemplate) -> Result<(), ToolError> {
        template.validate()?;
        match self.templates.iter_mut().find(|t| t.name == template.name) {
            Some(slot) => *slot = template,
            None => self.templates.push(template),
        }
        self.touch();
        Ok(())
    }

    pub fn remove_template(&mut self, name: &str) -> Result<PromptTemplate, ToolError> {
        let pos = self
            .templates
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| ToolError::UnknownTemplate(name.to_owned()))?;
        self.touch();
        Ok(self.templates.remove(pos))
    }

    /// Render template `name` for `node`. `{selection}` and `{var:NAME}` come
    /// from `vars` (keys `selection` and `NAME`); a `summary` entry overrides
    /// the computed `{summary}`.
    pub fn prepare_tool(
        &self,
        name: &str,
        node: NodeId,
        vars: &BTreeMap<String, String>,
        model: &dyn LanguageModel,
    ) -> Result<PreparedTool, ToolError> {
        let template = self.template(name)?.clone();
        self.ensure(node)?;
        let wanted = template.placeholders()?;
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        for p in &wanted {
            match p {
                Placeholder::Context => {
                    values.insert("context".into(), self.default_context(node, model)?.render());
                }
                Placeholder::Summary => {
                    let text = match vars.get("summary") {
                        Some(s) => s.clone(),
                        None => self.summarize_path(node, SUMMARY_TARGET_TOKENS, model)?.text,
                    };
                    values.insert("summary".into(), text);
                }
                Placeholder::Selection => {
                    values.insert("selection".into(), vars.get("selection").cloned().unwrap_or_default());
                }
                Placeholder::Var(n) => {
                    let v = vars.get(n).ok_or_else(|| ToolError::Unbound(n.clone()))?;
                    values.insert(format!("var:{n}"), v.clone());
                }
            }
        }
        let prompt = template.render(|p| {
            let key = match p {
                Placeholder::Context => "context".to_owned(),
                Placeholder::Summary => "summary".to_owned(),
                Placeholder::Selection => "selection".to_owned(),
                Placeholder::Var(n) => format!("var:{n}"),
            };
            values.get(&key).cloned()
        })?;
        Ok(PreparedTool { template, node, prompt })
    }

    /// Render, run and apply a tool in one step.
    pub fn run_tool(
        &mut self,
        name: &str,
        node: NodeId,
        vars: &BTreeMap<String, String>,
        model: &dyn LanguageModel,
    ) -> Result<ToolRun, ToolError> {
        let prepared = self.prepare_tool(name, node, vars, model)?;
        let text = prepared.execute(model)?;
        let created = match prepared.effect(&text, &model.name()) {
            Some(m) => self.apply(m)?.created,
            None => None,
        };
        Ok(ToolRun { prompt: prepared.prompt, text, output: prepared.template.output, created })
    }

    /// Hierarchical few-shot summary of the read view of `node`.
    ///
    /// The text is cut left to right into chunks of half the context budget
    /// and each chunk is summarized. With more than one chunk the joined
    /// summaries are summarized again, for at most three passes; the last
    /// pass keeps only the tail that fits one chunk.
    pub fn summarize_path(
        &self,
        node: NodeId,
        target_tokens: usize,
        model: &dyn LanguageModel,
    ) -> Result<Summary, ToolError> {
        if target_tokens < 8 {
            return Err(DocError::Invalid(format!("summary target must be >= 8 tokens, got {target_tokens}")).into());
        }
        let count = |s: &str| model.count_tokens(s);
        let chunk_size = (self.settings.context_budget_tokens / 2).max(8);
        let params = GenerationParams {
            temperature: 0.0,
            max_tokens: target_tokens,
            stop: vec!["\n\n".into()],
            ..GenerationParams::default()
        };
        let mut text = self.read_view(node)?;
        let mut calls = 0;
        let mut passes = 0;
        loop {
            passes += 1;
            let pieces = if passes == 3 {
                vec![suffix_within(&text, chunk_size, count)]
            } else {
                chunk(&text, chunk_size, count)
            };
            let mut summaries: Vec<String> = Vec::new();
            for piece in &pieces {
                calls += 1;
                match model.complete(&summary_prompt(piece), &params) {
                    Ok(c) => summaries.push(c.text.trim().to_owned()),
                    Err(e) => {
                        summaries.push(format!("{PARTIAL_MARKER} ({e})"));
                        return Ok(Summary { text: summaries.join(" "), calls, passes, partial: true });
                    }
                }
            }
            let single = pieces.len() <= 1;
            text = summaries.join(" ");
            if single {
                return Ok(Summary { text, calls, passes, partial: false });
            }
        }
    }
}
