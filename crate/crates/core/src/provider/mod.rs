//! Language model providers.
//!
//! Every provider answers one question: given a context, what are the most
//! likely next tokens? Completions are built on top of that by an
//! autoregressive sampling loop ([`sampling::complete_autoregressive`]),
//! which remote providers may replace with a server-side call.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub mod ngram;
pub mod remote;
pub mod sampling;
pub mod table;

pub use ngram::NgramModel;
pub use remote::{FixtureTransport, HttpTransport, RecordingTransport, RemoteConfig, RemoteModel, Transport};
pub use table::{TableModel, TableRule, TableSpec};

/// Slack allowed when summing probabilities.
pub const MASS_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure: {message}")]
    Transport { message: String, status: Option<u16>, retryable: bool, retry_after_secs: Option<u64> },
    #[error("provider response carries no log probabilities")]
    NoLogprobs,
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no recorded exchange matches request to {0}")]
    FixtureMiss(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Io(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { retryable: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// Ranked next-token probabilities: descending by probability, ties broken
/// by token text.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<TokenProb>,
}

impl TokenDistribution {
    pub fn new<T: Into<String>>(entries: impl IntoIterator<Item = (T, f64)>) -> Result<Self, ProviderError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut total = 0.0;
        for (token, prob) in entries {
            let token = token.into();
            if !(0.0..=1.0).contains(&prob) {
                return Err(ProviderError::InvalidDistribution(format!(
                    "probability {prob} for {token:?} is outside [0, 1]"
                )));
            }
            if !seen.insert(token.clone()) {
                return Err(ProviderError::InvalidDistribution(format!("duplicate token {token:?}")));
            }
            total += prob;
            out.push(TokenProb { token, prob });
        }
        if total > 1.0 + MASS_EPSILON {
            return Err(ProviderError::InvalidDistribution(format!("total mass {total} exceeds 1")));
        }
        out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token)));
        Ok(Self { entries: out })
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&TokenProb> {
        self.entries.first()
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.prob).sum()
    }

    pub fn truncated(mut self, top_k: usize) -> Self {
        self.entries.truncate(top_k);
        self
    }

    /// Smallest number of leading entries whose cumulative probability
    /// reaches `threshold`, or every entry when the listed mass falls short.
    pub fn prefix_reaching(&self, threshold: f64) -> usize {
        sampling::prefix_reaching(self.entries.iter().map(|e| e.prob), threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    /// Log probabilities are kept to six decimals so stored documents have a
    /// platform-independent canonical form.
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self { token: token.into(), logprob: round6(logprob) }
    }
}

pub(crate) fn round6(x: f64) -> f64 {
    if x.is_finite() {
        (x * 1e6).round() / 1e6
    } else {
        -1e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_tokens: 64, stop: Vec::new(), rng_seed: None }
    }
}

impl GenerationParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self { temperature: 0.0, max_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidParams(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProviderError::InvalidParams(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidParams("max_tokens must be >= 1".into()));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(ProviderError::InvalidParams("stop sequences must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// Hit `max_tokens`.
    Length,
    /// Hit a stop sequence.
    Stop,
    /// The provider had no continuation for the context.
    DeadEnd,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Appended fragments; their concatenation equals `text`.
    pub tokens: Vec<TokenLogprob>,
    pub finish_reason: FinishReason,
}

/// How local providers split text into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    Codepoint,
}

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
            Tokenizer::Codepoint => text.chars().map(String::from).collect(),
        }
    }

    pub fn count(self, text: &str) -> usize {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count(),
            Tokenizer::Codepoint => text.chars().count(),
        }
    }

    /// The text fragment that appends `token` to `context`.
    pub fn join(self, context: &str, token: &str) -> String {
        match self {
            Tokenizer::Whitespace if !context.is_empty() && !context.ends_with(char::is_whitespace) => {
                format!(" {token}")
            }
            _ => token.to_owned(),
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn name(&self) -> String;

    /// The `top_k` most likely next tokens for `context`.
    fn next_distribution(&self, context: &str, top_k: usize) -> Result<TokenDistribution, ProviderError>;

    fn complete(&self, context: &str, params: &GenerationParams) -> Result<Completion, ProviderError> {
        sampling::complete_autoregressive(self, context, params)
    }

    /// Token estimate used for context budgeting.
    fn count_tokens(&self, text: &str) -> usize;

    /// Text appended to `context` when `token` is chosen.
    fn fragment(&self, _context: &str, token: &str) -> String {
        token.to_owned()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn next_distribution(&self, context: &str, top_k: usize) -> Result<TokenDistribution, ProviderError> {
        (**self).next_distribution(context, top_k)
    }

    fn complete(&self, context: &str, params: &GenerationParams) -> Result<Completion, ProviderError> {
        (**self).complete(context, params)
    }

    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }

    fn fragment(&self, context: &str, token: &str) -> String {
        (**self).fragment(context, token)
    }
}

/// Provider selection as stored in a document. Never holds secrets: remote
/// auth is read from the environment variable it names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Table(TableSpec),
    Ngram {
        corpus_path: String,
        order: usize,
        #[serde(default)]
        tokenizer: Tokenizer,
    },
    Remote(RemoteConfig),
}

impl ProviderConfig {
    /// Parse a command-line provider spec:
    /// `table:m1`, `table:PATH.json`, `ngram:ORDER:PATH`, `ngram-chars:ORDER:PATH`,
    /// `remote:MODEL@URL`.
    pub fn from_spec(spec: &str) -> Result<Self, ProviderError> {
        let bad = || ProviderError::Config(format!("unrecognized provider spec {spec:?}"));
        let (kind, rest) = spec.split_once(':').ok_or_else(bad)?;
        let config = match kind {
            "table" if rest == "m1" => ProviderConfig::Table(TableSpec::m1()),
            "table" => {
                let raw = std::fs::read_to_string(rest).map_err(|e| ProviderError::Io(format!("{rest}: {e}")))?;
                ProviderConfig::Table(
                    serde_json::from_str(&raw).map_err(|e| ProviderError::Config(format!("{rest}: {e}")))?,
                )
            }
            "ngram" | "ngram-chars" => {
                let (order, path) = rest.split_once(':').ok_or_else(bad)?;
                ProviderConfig::Ngram {
                    corpus_path: path.to_owned(),
                    order: order.parse().map_err(|_| bad())?,
                    tokenizer: if kind == "ngram" { Tokenizer::Whitespace } else { Tokenizer::Codepoint },
                }
            }
            "remote" => {
                let (model, url) = rest.split_once('@').ok_or_else(bad)?;
                ProviderConfig::Remote(RemoteConfig::new(url, model))
            }
            _ => return Err(bad()),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        match self {
            ProviderConfig::Table(spec) => spec.build().map(drop),
            ProviderConfig::Ngram { order, corpus_path, .. } => {
                if *order == 0 {
                    return Err(ProviderError::Config("ngram order must be >= 1".into()));
                }
                if corpus_path.is_empty() {
                    return Err(ProviderError::Config("ngram corpus path is empty".into()));
                }
                Ok(())
            }
            ProviderConfig::Remote(remote) => remote.validate(),
        }
    }

    /// Instantiate the provider. Relative paths resolve against `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> Result<Arc<dyn LanguageModel>, ProviderError> {
        self.validate()?;
        let resolve = |p: &str| match base_dir {
            Some(dir) if Path::new(p).is_relative() => dir.join(p),
            _ => p.into(),
        };
        Ok(match self {
            ProviderConfig::Table(spec) => Arc::new(spec.build()?),
            ProviderConfig::Ngram { corpus_path, order, tokenizer } => {
                let path = resolve(corpus_path);
                let corpus = std::fs::read_to_string(&path)
                    .map_err(|e| ProviderError::Io(format!("{}: {e}", path.display())))?;
                Arc::new(NgramModel::train(&corpus, *order, *tokenizer)?)
            }
            ProviderConfig::Remote(remote) => {
                let transport: Arc<dyn Transport> = match &remote.fixture {
                    Some(f) => Arc::new(FixtureTransport::load(resolve(f))?),
                    None => Arc::new(HttpTransport::new(remote.timeout_secs)),
                };
                Arc::new(RemoteModel::new(remote.clone(), transport)?)
            }
        })
    }
}
