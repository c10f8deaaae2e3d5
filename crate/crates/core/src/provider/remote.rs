//! OpenAI-style completion endpoint.
//!
//! Requests go through a [`Transport`], so tests replay recorded exchanges
//! from a fixture file instead of touching the network.

use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Completion, FinishReason, GenerationParams, LanguageModel, ProviderError, TokenDistribution, TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Replay recorded exchanges from this file instead of using HTTP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
}

fn default_timeout() -> u64 {
    60
}

fn default_in_flight() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: Some("LOOM_API_KEY".into()),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            fixture: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(ProviderError::Config("remote provider needs a base URL and a model".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait Transport: Send + Sync {
    fn post(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, ProviderError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout_secs: u64) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs)))
            .http_status_as_error(false)
            .build();
        Self { agent: config.into() }
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
        let mut request = self.agent.post(url);
        if let Some(token) = bearer {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| ProviderError::Transport {
            message: e.to_string(),
            status: None,
            retryable: matches!(e, ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed),
            retry_after_secs: None,
        })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let retry_after_secs =
                response.headers().get("retry-after").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse().ok());
            let message = response.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::Transport {
                message: format!("HTTP {status}: {message}"),
                status: Some(status),
                retryable: status == 429 || status >= 500,
                retry_after_secs,
            });
        }
        response.body_mut().read_json().map_err(|e| ProviderError::Malformed(e.to_string()))
    }
}

/// A recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub url: String,
    pub request: Value,
    pub response: Value,
}

/// Replays recorded exchanges. A request matches an exchange with the same
/// URL and body; identical requests consume matching exchanges in order and
/// repeat the last one once exhausted.
pub struct FixtureTransport {
    exchanges: Vec<Exchange>,
    used: Mutex<Vec<bool>>,
}

impl FixtureTransport {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        let used = Mutex::new(vec![false; exchanges.len()]);
        Self { exchanges, used }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| ProviderError::Io(format!("{}: {e}", path.display())))?;
        let exchanges =
            serde_json::from_str(&raw).map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(exchanges))
    }
}

impl Transport for FixtureTransport {
    fn post(&self, url: &str, _bearer: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
        let mut used = self.used.lock().expect("fixture lock");
        let matching: Vec<usize> = self
            .exchanges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.url == url && e.request == *body)
            .map(|(i, _)| i)
            .collect();
        let pick = matching
            .iter()
            .copied()
            .find(|i| !used[*i])
            .or_else(|| matching.last().copied())
            .ok_or_else(|| ProviderError::FixtureMiss(url.to_owned()))?;
        used[pick] = true;
        Ok(self.exchanges[pick].response.clone())
    }
}

/// Wraps another transport and keeps every exchange for writing a fixture.
pub struct RecordingTransport<T> {
    inner: T,
    log: Mutex<Vec<Exchange>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().expect("recorder lock").clone()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(&self.exchanges())?;
        std::fs::write(path, json + "\n")
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
        let response = self.inner.post(url, bearer, body)?;
        self.log.lock().expect("recorder lock").push(Exchange {
            url: url.to_owned(),
            request: body.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}

/// Counting semaphore for the in-flight request cap.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GatePermit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        GatePermit(self)
    }
}

struct GatePermit<'a>(&'a Gate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteModel {
    config: RemoteConfig,
    transport: Arc<dyn Transport>,
    gate: Gate,
}

impl RemoteModel {
    pub fn new(config: RemoteConfig, transport: Arc<dyn Transport>) -> Result<Self, ProviderError> {
        config.validate()?;
        let gate = Gate { free: Mutex::new(config.max_in_flight), cv: Condvar::new() };
        Ok(Self { config, transport, gate })
    }

    fn url(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn call(&self, body: Value) -> Result<Value, ProviderError> {
        let token = self.config.auth_env.as_deref().and_then(|var| std::env::var(var).ok());
        let _permit = self.gate.acquire();
        self.transport.post(&self.url(), token.as_deref(), &body)
    }

    /// The request body sent for a completion.
    pub fn completion_request(&self, prompt: &str, params: &GenerationParams) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "logprobs": 1,
        });
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        if let Some(seed) = params.rng_seed {
            body["seed"] = json!(seed);
        }
        body
    }

    /// The request body sent for a next-token distribution.
    pub fn distribution_request(&self, prompt: &str, top_k: usize) -> Value {
        json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": top_k.min(20),
        })
    }
}

fn first_choice(response: &Value) -> Result<&Value, ProviderError> {
    response
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| ProviderError::Malformed("response has no choices".into()))
}

impl LanguageModel for RemoteModel {
    fn name(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn next_distribution(&self, context: &str, top_k: usize) -> Result<TokenDistribution, ProviderError> {
        if top_k == 0 {
            return Err(ProviderError::InvalidParams("top_k must be >= 1".into()));
        }
        let response = self.call(self.distribution_request(context, top_k))?;
        let top = first_choice(&response)?
            .pointer("/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or(ProviderError::NoLogprobs)?;
        let mut entries = Vec::with_capacity(top.len());
        for (token, lp) in top {
            let lp = lp.as_f64().ok_or_else(|| ProviderError::Malformed(format!("logprob for {token:?}")))?;
            entries.push((token.clone(), lp.exp().min(1.0)));
        }
        Ok(TokenDistribution::new(entries)?.truncated(top_k))
    }

    fn complete(&self, context: &str, params: &GenerationParams) -> Result<Completion, ProviderError> {
        params.validate()?;
        let response = self.call(self.completion_request(context, params))?;
        let choice = first_choice(&response)?;
        let text = choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Malformed("choice has no text".into()))?
            .to_owned();
        let tokens = match (
            choice.pointer("/logprobs/tokens").and_then(Value::as_array),
            choice.pointer("/logprobs/token_logprobs").and_then(Value::as_array),
        ) {
            (Some(toks), Some(lps)) => toks
                .iter()
                .zip(lps)
                .map(|(t, lp)| TokenLogprob::new(t.as_str().unwrap_or_default(), lp.as_f64().unwrap_or(f64::NAN)))
                .collect(),
            _ => Vec::new(),
        };
        let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") | None => FinishReason::Length,
            Some("stop") => FinishReason::Stop,
            Some(other) => FinishReason::Other(other.to_owned()),
        };
        Ok(Completion { text, tokens, finish_reason })
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}
