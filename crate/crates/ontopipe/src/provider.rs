//! Chat-completion provider boundary.
//!
//! Every model interaction in the pipeline goes through [`ChatProvider`], a
//! synchronous request/response trait. Two implementations ship with the
//! crate: [`ScriptedProvider`] replays a transcript of matcher/response pairs
//! and makes whole pipeline runs deterministic and offline-testable, and
//! [`HttpChatProvider`] talks to any chat-completions HTTP endpoint with
//! retry/backoff. Both keep a call log (request/response digests, latency,
//! retry count, and the full request text for audits).

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ontology::hex;

/// Message author role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One turn of a chat conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// A full request to a chat provider. Temperature defaults to 0 so that
/// repeated runs are as reproducible as the backing model allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        ChatRequest { messages, model_id: None, temperature: 0.0, max_output_tokens: None }
    }

    /// Content of the last user message, the part scripted matchers run on.
    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// Canonical text rendering used for digests and call-log audits.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for message in &self.messages {
            out.push_str(message.role.as_str());
            out.push_str(": ");
            out.push_str(&message.content);
            out.push('\n');
        }
        out
    }

    /// Whitespace-token count over all message contents.
    pub fn approx_tokens(&self) -> usize {
        self.messages.iter().map(|m| m.content.split_whitespace().count()).sum()
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("prompt of ~{tokens} tokens exceeds the configured limit of {limit}")]
    PromptTooLarge { tokens: usize, limit: usize },
    #[error("request has no user message")]
    NoUserMessage,
    #[error("script exhausted: no remaining entry matches the request (last user message starts {snippet:?})")]
    ScriptExhausted { snippet: String },
    #[error("strict script mismatch at entry {index}: expected a match on {expected:?}, request starts {snippet:?}")]
    ScriptMismatch { index: usize, expected: String, snippet: String },
    #[error("malformed script file at line {line}: {message}")]
    MalformedScript { line: usize, message: String },
    #[error("failed to read script file: {0}")]
    Io(#[from] std::io::Error),
    #[error("auth env var {0} is not set")]
    MissingAuth(String),
    #[error("authentication rejected with status {0}")]
    AuthRejected(u16),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport failure after {retries} retries: {message}")]
    Transport { retries: u32, message: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

/// One completed (or failed) provider call.
#[derive(Debug, Clone, Serialize)]
pub struct CallRecord {
    pub seq: usize,
    pub request_sha256: String,
    pub response_sha256: String,
    pub latency_ms: u64,
    pub retries: u32,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Full request rendering, kept for isolation audits.
    #[serde(skip)]
    pub request_text: String,
    #[serde(skip)]
    pub response_text: String,
}

/// Thread-safe call log shared by the provider implementations.
#[derive(Debug, Default)]
pub struct CallLog {
    seq: AtomicUsize,
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn new() -> Self {
        CallLog::default()
    }

    pub fn record(&self, request: &ChatRequest, outcome: &Result<String, ProviderError>, started: Instant, retries: u32) {
        let request_text = request.render();
        let (response_text, ok, error) = match outcome {
            Ok(text) => (text.clone(), true, None),
            Err(e) => (String::new(), false, Some(e.to_string())),
        };
        let record = CallRecord {
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            request_sha256: sha256_hex(&request_text),
            response_sha256: sha256_hex(&response_text),
            latency_ms: started.elapsed().as_millis() as u64,
            retries,
            ok,
            error,
            request_text,
            response_text,
        };
        self.records.lock().expect("call log poisoned").push(record);
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.records.lock().expect("call log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sha256_hex(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// The uniform model boundary. Implementations must be safe to share across
/// worker threads.
pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
    fn call_log(&self) -> Vec<CallRecord>;
    fn call_count(&self) -> usize {
        self.call_log().len()
    }
}

fn enforce_budget(request: &ChatRequest, limit: Option<usize>) -> Result<(), ProviderError> {
    if let Some(limit) = limit {
        let tokens = request.approx_tokens();
        if tokens > limit {
            return Err(ProviderError::PromptTooLarge { tokens, limit });
        }
    }
    Ok(())
}

pub(crate) fn snippet(text: &str) -> String {
    text.chars().take(80).collect()
}

/// Matcher for one scripted entry, applied to the last user message.
#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Substring(needle) => text.contains(needle.as_str()),
            Matcher::Pattern(re) => re.is_match(text),
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Substring(s) => write!(f, "substring {s:?}"),
            Matcher::Pattern(re) => write!(f, "pattern /{re}/"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: String,
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    #[serde(rename = "match")]
    matcher: String,
    response: String,
    #[serde(default)]
    regex: bool,
}

#[derive(Debug, Deserialize)]
struct ScriptHeader {
    #[serde(default)]
    strict: bool,
}

/// Deterministic provider that replays a transcript.
///
/// In strict mode every request must match the next entry in order; otherwise
/// each request consumes the first not-yet-used entry whose matcher fires.
pub struct ScriptedProvider {
    name: String,
    entries: Vec<ScriptEntry>,
    strict: bool,
    state: Mutex<ScriptState>,
    max_prompt_tokens: Option<usize>,
    log: CallLog,
}

#[derive(Debug, Default)]
struct ScriptState {
    cursor: usize,
    consumed: Vec<bool>,
}

impl ScriptedProvider {
    pub fn new(name: impl Into<String>) -> Self {
        ScriptedProvider {
            name: name.into(),
            entries: Vec::new(),
            strict: false,
            state: Mutex::new(ScriptState::default()),
            max_prompt_tokens: None,
            log: CallLog::new(),
        }
    }

    /// Appends a substring-matched entry.
    pub fn respond(mut self, matcher: impl Into<String>, response: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry { matcher: Matcher::Substring(matcher.into()), response: response.into() });
        self.sync_state();
        self
    }

    /// Appends a regex-matched entry.
    pub fn respond_pattern(mut self, pattern: &str, response: impl Into<String>) -> Self {
        let re = Regex::new(pattern).expect("invalid script pattern");
        self.entries.push(ScriptEntry { matcher: Matcher::Pattern(re), response: response.into() });
        self.sync_state();
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_prompt_limit(mut self, limit: usize) -> Self {
        self.max_prompt_tokens = Some(limit);
        self
    }

    /// Loads a transcript from a line-delimited JSON file. Each line is
    /// `{"match": "...", "response": "...", "regex": false}`; an optional
    /// first line `{"strict": true}` switches to in-order matching.
    pub fn from_file(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)?;
        let mut provider = ScriptedProvider::new(name);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if i == 0 && !line.contains("\"match\"") {
                let header: ScriptHeader = serde_json::from_str(line)
                    .map_err(|e| ProviderError::MalformedScript { line: i + 1, message: e.to_string() })?;
                provider.strict = header.strict;
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(line)
                .map_err(|e| ProviderError::MalformedScript { line: i + 1, message: e.to_string() })?;
            let matcher = if entry.regex {
                Matcher::Pattern(Regex::new(&entry.matcher).map_err(|e| ProviderError::MalformedScript {
                    line: i + 1,
                    message: e.to_string(),
                })?)
            } else {
                Matcher::Substring(entry.matcher)
            };
            provider.entries.push(ScriptEntry { matcher, response: entry.response });
        }
        provider.sync_state();
        Ok(provider)
    }

    /// Number of entries not yet consumed.
    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("script state poisoned");
        state.consumed.iter().filter(|&&c| !c).count()
    }

    fn sync_state(&mut self) {
        self.state = Mutex::new(ScriptState { cursor: 0, consumed: vec![false; self.entries.len()] });
    }

    fn pick(&self, target: &str) -> Result<usize, ProviderError> {
        let mut state = self.state.lock().expect("script state poisoned");
        if self.strict {
            let index = state.cursor;
            let entry = self.entries.get(index).ok_or_else(|| ProviderError::ScriptExhausted {
                snippet: snippet(target),
            })?;
            if !entry.matcher.matches(target) {
                return Err(ProviderError::ScriptMismatch {
                    index,
                    expected: entry.matcher.to_string(),
                    snippet: snippet(target),
                });
            }
            state.cursor += 1;
            state.consumed[index] = true;
            return Ok(index);
        }
        for (index, entry) in self.entries.iter().enumerate() {
            if !state.consumed[index] && entry.matcher.matches(target) {
                state.consumed[index] = true;
                return Ok(index);
            }
        }
        Err(ProviderError::ScriptExhausted { snippet: snippet(target) })
    }
}

impl ChatProvider for ScriptedProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let started = Instant::now();
        let outcome = (|| {
            enforce_budget(request, self.max_prompt_tokens)?;
            let target = request.last_user_message().ok_or(ProviderError::NoUserMessage)?;
            let index = self.pick(target)?;
            Ok(self.entries[index].response.clone())
        })();
        self.log.record(request, &outcome, started, 0);
        outcome
    }

    fn call_log(&self) -> Vec<CallRecord> {
        self.log.snapshot()
    }
}

/// Provider backed by a plain function; handy for programmatic oracles.
pub struct ClosureProvider {
    name: String,
    f: Box<dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync>,
    log: CallLog,
}

impl ClosureProvider {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        ClosureProvider { name: name.into(), f: Box::new(f), log: CallLog::new() }
    }
}

impl ChatProvider for ClosureProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let started = Instant::now();
        let outcome = (self.f)(request);
        self.log.record(request, &outcome, started, 0);
        outcome
    }

    fn call_log(&self) -> Vec<CallRecord> {
        self.log.snapshot()
    }
}

/// Configuration for [`HttpChatProvider`]. The request/response shapes follow
/// the widely adopted `chat/completions` JSON layout, so any compatible
/// endpoint works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub base_url: String,
    #[serde(default = "default_completions_path")]
    pub completions_path: String,
    pub model: String,
    /// Env var holding the bearer token. `None` sends no auth header.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Base backoff; attempt `n` waits `backoff_ms << n`.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub max_prompt_tokens: Option<usize>,
}

fn default_completions_path() -> String {
    "/v1/chat/completions".to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    50
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: String,
}

/// Remote chat-completions adapter with retry and exponential backoff.
pub struct HttpChatProvider {
    config: HttpChatConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
    log: CallLog,
}

impl HttpChatProvider {
    pub fn new(config: HttpChatConfig) -> Result<Self, ProviderError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ProviderError::MissingAuth(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport { retries: 0, message: e.to_string() })?;
        Ok(HttpChatProvider { config, token, client, log: CallLog::new() })
    }

    fn endpoint(&self) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), self.config.completions_path)
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, (bool, ProviderError)> {
        let model = request.model_id.as_deref().unwrap_or(&self.config.model);
        let body = WireRequest {
            model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage { role: m.role.as_str(), content: &m.content })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| (true, ProviderError::Transport { retries: 0, message: e.to_string() }))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| (true, ProviderError::Transport { retries: 0, message: e.to_string() }))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err((false, ProviderError::AuthRejected(status.as_u16())));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, ProviderError::Http { status: status.as_u16(), body: snippet(&text) }));
        }
        if !status.is_success() {
            return Err((false, ProviderError::Http { status: status.as_u16(), body: snippet(&text) }));
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| (false, ProviderError::MalformedResponse(e.to_string())))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| (false, ProviderError::MalformedResponse("empty choices".to_string())))
    }
}

impl ChatProvider for HttpChatProvider {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let started = Instant::now();
        let mut retries = 0u32;
        let outcome = loop {
            if let Err(e) = enforce_budget(request, self.config.max_prompt_tokens) {
                break Err(e);
            }
            match self.attempt(request) {
                Ok(text) => break Ok(text),
                Err((retryable, error)) => {
                    if retryable && retries < self.config.max_retries {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << retries));
                        retries += 1;
                        continue;
                    }
                    break Err(match error {
                        ProviderError::Transport { message, .. } => ProviderError::Transport { retries, message },
                        other => other,
                    });
                }
            }
        };
        self.log.record(request, &outcome, started, retries);
        outcome
    }

    fn call_log(&self) -> Vec<CallRecord> {
        self.log.snapshot()
    }
}
