//! Turns (subject, target age, condition) into a concrete edit prompt.
//!
//! Template mode looks the condition up in a table shipped as
//! `data/prompt_templates.toml`; LLM mode asks a chat-completion endpoint and
//! falls back to the template when the endpoint cannot be used. The bundled
//! system prompt is our own reconstruction, not a published one.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const MIN_AGE: f64 = 20.0;
pub const MAX_AGE: f64 = 90.0;
pub const TOKEN_ENV: &str = "AMK_LLM_TOKEN";

const BUILTIN_TABLE: &str = include_str!("../data/prompt_templates.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("target age {0} is outside 20..=90")]
    AgeOutOfRange(f64),
    #[error("subject description is empty")]
    EmptySubject,
    #[error("condition {0:?} is already registered")]
    DuplicateCondition(String),
    #[error("invalid condition entry {key:?}: {reason}")]
    InvalidEntry { key: String, reason: String },
    #[error("malformed template table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub subject: String,
    pub age: f64,
    pub condition: String,
}

impl EditRequest {
    pub fn new(subject: impl Into<String>, age: f64, condition: impl Into<String>) -> Result<Self, PromptError> {
        let req = EditRequest {
            subject: subject.into(),
            age,
            condition: condition.into(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        validate_age(self.age)?;
        if self.subject.trim().is_empty() {
            return Err(PromptError::EmptySubject);
        }
        Ok(())
    }
}

pub fn validate_age(age: f64) -> Result<(), PromptError> {
    if !(MIN_AGE..=MAX_AGE).contains(&age) {
        return Err(PromptError::AgeOutOfRange(age));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub key: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub attributes: Vec<String>,
    pub template: String,
}

impl ConditionEntry {
    /// Table lint: at least two attributes, each spelled out in the template.
    pub fn lint(&self) -> Result<(), PromptError> {
        let bad = |reason: &str| PromptError::InvalidEntry {
            key: self.key.clone(),
            reason: reason.to_string(),
        };
        if self.key.trim().is_empty() {
            return Err(bad("empty key"));
        }
        if self.attributes.len() < 2 {
            return Err(bad("fewer than two attributes"));
        }
        if let Some(a) = self.attributes.iter().find(|a| !self.template.contains(a.as_str())) {
            return Err(bad(&format!("attribute {a:?} missing from template")));
        }
        if !self.template.contains("{age}") || !self.template.contains("{subject}") {
            return Err(bad("template needs {age} and {subject}"));
        }
        Ok(())
    }

    fn matches(&self, name: &str) -> bool {
        let name = normalize(name);
        normalize(&self.key) == name || self.aliases.iter().any(|a| normalize(a) == name)
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Deserialize)]
struct TemplateTable {
    system_prompt: String,
    user_prompt: String,
    condition: Vec<ConditionEntry>,
}

/// Ordered condition table plus the LLM instructions that go with it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCatalog {
    system_prompt: String,
    user_prompt: String,
    entries: Vec<ConditionEntry>,
}

impl ConditionCatalog {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_TABLE).expect("bundled template table is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let table: TemplateTable = toml::from_str(text).map_err(|e| PromptError::Table(e.to_string()))?;
        let mut catalog = ConditionCatalog {
            system_prompt: table.system_prompt.trim().to_string(),
            user_prompt: table.user_prompt,
            entries: Vec::new(),
        };
        for entry in table.condition {
            catalog.register(entry)?;
        }
        Ok(catalog)
    }

    /// Appends `entry`; its key and aliases must not collide with existing names.
    pub fn register(&mut self, entry: ConditionEntry) -> Result<(), PromptError> {
        entry.lint()?;
        let names = std::iter::once(&entry.key).chain(&entry.aliases);
        for name in names {
            if self.lookup(name).is_some() {
                return Err(PromptError::DuplicateCondition(name.clone()));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.key.clone()).collect()
    }

    pub fn entries(&self) -> &[ConditionEntry] {
        &self.entries
    }

    /// Finds an entry by key or alias, ignoring case and extra whitespace.
    pub fn lookup(&self, name: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.matches(name))
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn user_message(&self, req: &EditRequest) -> String {
        fill(&self.user_prompt, req).replace("{condition}", req.condition.trim())
    }

    /// Deterministic prompt for `req`.
    pub fn render(&self, req: &EditRequest) -> String {
        let cond = req.condition.trim();
        if cond.is_empty() {
            return format!("{}, {} years old", req.subject.trim(), req.age);
        }
        match self.lookup(cond) {
            Some(entry) => fill(&entry.template, req),
            None => format!("{}, {} years old, {cond}", req.subject.trim(), req.age),
        }
    }
}

impl Default for ConditionCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

fn fill(template: &str, req: &EditRequest) -> String {
    template
        .replace("{subject}", req.subject.trim())
        .replace("{age}", &req.age.to_string())
}

/// Keys of the bundled catalog, in table order.
pub fn condition_catalog() -> Vec<String> {
    ConditionCatalog::builtin().keys()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    Template,
    Llm,
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineMode::Template => "template",
            RefineMode::Llm => "llm",
        })
    }
}

/// Raw request/response pair kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub request: serde_json::Value,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    pub text: String,
    /// Mode that produced `text`.
    pub mode: RefineMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<LlmExchange>,
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct LlmError {
    pub message: String,
    pub exchange: Option<LlmExchange>,
}

impl LlmError {
    pub fn new(message: impl Into<String>) -> Self {
        LlmError {
            message: message.into(),
            exchange: None,
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<LlmExchange, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_interval_ms")]
    pub min_interval_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_interval_ms() -> u64 {
    500
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Spaces out requests to the same host by at least `min_interval`.
#[derive(Debug, Default)]
pub struct HostThrottle {
    min_interval: Duration,
    next_slot: Mutex<HashMap<String, Instant>>,
}

impl HostThrottle {
    pub fn new(min_interval: Duration) -> Self {
        HostThrottle {
            min_interval,
            next_slot: Mutex::new(HashMap::new()),
        }
    }

    /// Reserves the next slot for `host` and returns how long to wait for it.
    pub fn reserve(&self, host: &str) -> Duration {
        let now = Instant::now();
        let mut slots = self.next_slot.lock().unwrap_or_else(|p| p.into_inner());
        let slot = slots.get(host).copied().filter(|s| *s > now).unwrap_or(now);
        slots.insert(host.to_string(), slot + self.min_interval);
        slot - now
    }

    pub fn wait(&self, host: &str) {
        let d = self.reserve(host);
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpChatClient {
    config: LlmConfig,
    token: Option<String>,
    agent: ureq::Agent,
    throttle: Arc<HostThrottle>,
}

impl HttpChatClient {
    pub fn new(config: LlmConfig, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let throttle = Arc::new(HostThrottle::new(Duration::from_millis(config.min_interval_ms)));
        HttpChatClient {
            config,
            token,
            agent,
            throttle,
        }
    }

    /// Token read from `AMK_LLM_TOKEN`.
    pub fn from_env(config: LlmConfig) -> Self {
        Self::new(config, std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<LlmExchange, LlmError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        let host = self
            .config
            .endpoint
            .parse::<ureq::http::Uri>()
            .ok()
            .and_then(|u| u.authority().map(|a| a.to_string()))
            .ok_or_else(|| LlmError::new(format!("bad endpoint {:?}", self.config.endpoint)))?;
        self.throttle.wait(&host);
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let fail = |message: String, response: String| LlmError {
            message,
            exchange: Some(LlmExchange {
                request: body.clone(),
                response,
            }),
        };
        let mut resp = req.send_json(&body).map_err(|e| fail(e.to_string(), String::new()))?;
        let status = resp.status();
        let raw = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| fail(e.to_string(), String::new()))?;
        if !status.is_success() {
            return Err(fail(format!("endpoint answered {status}"), raw));
        }
        Ok(LlmExchange { request: body, response: raw })
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn completion_text(raw: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(raw).ok()?;
    let text = v.pointer("/choices/0/message/content")?.as_str()?.trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Refines `req`. In LLM mode any client failure, a missing client, or a
/// reply without the target age falls back to the template with a warning.
pub fn refine_prompt(
    req: &EditRequest,
    mode: RefineMode,
    catalog: &ConditionCatalog,
    client: Option<&dyn ChatClient>,
) -> Result<RefinedPrompt, PromptError> {
    req.validate()?;
    let template = || catalog.render(req);
    if mode == RefineMode::Template {
        return Ok(RefinedPrompt {
            text: template(),
            mode,
            warning: None,
            exchange: None,
        });
    }
    let fallback = |warning: String, exchange: Option<LlmExchange>| {
        log::warn!("prompt refinement fell back to template: {warning}");
        RefinedPrompt {
            text: template(),
            mode: RefineMode::Template,
            warning: Some(warning),
            exchange,
        }
    };
    let Some(client) = client else {
        return Ok(fallback("no LLM client configured".into(), None));
    };
    match client.complete(catalog.system_prompt(), &catalog.user_message(req)) {
        Err(e) => Ok(fallback(format!("LLM unreachable: {}", e.message), e.exchange)),
        Ok(exchange) => match completion_text(&exchange.response) {
            None => Ok(fallback("LLM reply had no usable text".into(), Some(exchange))),
            Some(text) if !text.contains(&req.age.to_string()) => {
                Ok(fallback("LLM reply omitted the target age".into(), Some(exchange)))
            }
            Some(text) => Ok(RefinedPrompt {
                text,
                mode,
                warning: None,
                exchange: Some(exchange),
            }),
        },
    }
}
