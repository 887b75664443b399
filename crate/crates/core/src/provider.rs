//! Language-model provider abstraction with remote, mock and scripted backends.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const EXTRACTION_TEMPLATE: &str = include_str!("../assets/extraction_prompt.txt");
pub const CLARIFICATION_TEMPLATE: &str = include_str!("../assets/clarification_prompt.txt");
pub const TRANSLATION_TEMPLATE: &str = include_str!("../assets/translation_prompt.txt");
pub const SUMMARY_TEMPLATE: &str = include_str!("../assets/summary_prompt.txt");
pub const FORMAT_REMINDER: &str = include_str!("../assets/format_reminder.txt");
pub const DECISION_CONTRACT: &str = include_str!("../assets/decision_contract.txt");
const MOCK_DRAMATURGY: &str = include_str!("../assets/mock_dramaturgy.json");
const MOCK_TRANSLATION: &str = include_str!("../assets/mock_translation.json");

/// Which reply shape the caller expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyContract {
    Decision,
    Extraction,
    Clarification,
    Translation,
    Summary,
}

impl fmt::Display for ReplyContract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReplyContract::Decision => "decision",
            ReplyContract::Extraction => "extraction",
            ReplyContract::Clarification => "clarification",
            ReplyContract::Translation => "translation",
            ReplyContract::Summary => "summary",
        };
        f.write_str(s)
    }
}

/// A two-part request: `system` carries the composed prompt, `user` the
/// triggering event or payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub contract: ReplyContract,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("provider transport failure: {0}")]
    Transport(String),
    #[error("scripted provider exhausted")]
    Exhausted,
    #[error("provider misconfigured: {0}")]
    Config(String),
}

pub trait LanguageModelProvider: Send + Sync {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError>;

    fn name(&self) -> &str;
}

impl<P: LanguageModelProvider + ?Sized> LanguageModelProvider for std::sync::Arc<P> {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// One recorded reply; `Err` replays a transport failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Failure { error: String },
}

/// Replies in exact load order and errors once exhausted.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    replies: Mutex<VecDeque<ScriptedReply>>,
}

impl ScriptedProvider {
    pub fn new<I: IntoIterator<Item = ScriptedReply>>(replies: I) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
        }
    }

    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(texts.into_iter().map(|t| ScriptedReply::Text(t.into())))
    }

    /// Replies file: a JSON array whose items are reply strings, reply
    /// objects (serialized to their JSON text), or `{"error": "..."}`.
    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let items: Vec<Value> =
            serde_json::from_str(text).map_err(|e| ProviderError::Config(e.to_string()))?;
        let replies = items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => ScriptedReply::Text(s),
                Value::Object(ref o) if o.len() == 1 && o.get("error").is_some_and(Value::is_string) => {
                    ScriptedReply::Failure {
                        error: o["error"].as_str().unwrap_or_default().to_string(),
                    }
                }
                other => ScriptedReply::Text(other.to_string()),
            })
            .collect::<Vec<_>>();
        Ok(Self::new(replies))
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

impl LanguageModelProvider for ScriptedProvider {
    fn complete(&self, _request: &ProviderRequest) -> Result<String, ProviderError> {
        match self.replies.lock().unwrap().pop_front() {
            Some(ScriptedReply::Text(t)) => Ok(t),
            Some(ScriptedReply::Failure { error }) => Err(ProviderError::Transport(error)),
            None => Err(ProviderError::Exhausted),
        }
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match", default)]
    pub keywords: Vec<String>,
    pub reply: Value,
    #[serde(default = "default_contract")]
    pub contract: ReplyContract,
}

fn default_contract() -> ReplyContract {
    ReplyContract::Decision
}

#[derive(Debug, Clone, Deserialize)]
struct FieldRule {
    #[serde(rename = "match")]
    keywords: Vec<String>,
    fields: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, Deserialize)]
struct TranslationRule {
    #[serde(rename = "match")]
    keywords: Vec<String>,
    command: String,
}

fn matches_all(keywords: &[String], haystack: &str) -> bool {
    keywords
        .iter()
        .all(|k| haystack.contains(&k.to_lowercase()))
}

/// Deterministic keyword-table provider.
///
/// Decision requests are answered from the loaded table (first match wins,
/// matched case-insensitively against the system and user text). Other
/// contracts use table entries tagged with that contract when present and
/// fall back to the shipped rulesets otherwise.
#[derive(Debug, Clone)]
pub struct MockProvider {
    entries: Vec<MockEntry>,
    dramaturgy: Vec<FieldRule>,
    translation: Vec<TranslationRule>,
}

impl MockProvider {
    pub fn new(entries: Vec<MockEntry>) -> Result<Self, ProviderError> {
        let decision: Vec<_> = entries
            .iter()
            .filter(|e| e.contract == ReplyContract::Decision)
            .collect();
        if let Some(last) = decision.last() {
            if !last.keywords.is_empty() {
                return Err(ProviderError::Config(
                    "mock table must end with a default entry (empty match list)".into(),
                ));
            }
        } else {
            return Err(ProviderError::Config("mock table has no decision entries".into()));
        }
        Ok(Self {
            entries,
            dramaturgy: serde_json::from_str(MOCK_DRAMATURGY).expect("shipped dramaturgy ruleset"),
            translation: serde_json::from_str(MOCK_TRANSLATION).expect("shipped translation ruleset"),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let entries: Vec<MockEntry> =
            serde_json::from_str(text).map_err(|e| ProviderError::Config(e.to_string()))?;
        Self::new(entries)
    }

    /// A table whose only decision entry holds still.
    pub fn holding() -> Self {
        Self::new(vec![MockEntry {
            keywords: vec![],
            reply: json!({"actions": [], "reasoning": "Nothing calls for a change; holding still."}),
            contract: ReplyContract::Decision,
        }])
        .expect("valid default table")
    }

    fn table_reply(&self, contract: ReplyContract, haystack: &str) -> Option<String> {
        self.entries
            .iter()
            .filter(|e| e.contract == contract)
            .find(|e| matches_all(&e.keywords, haystack))
            .map(|e| match &e.reply {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
    }

    fn extract(&self, framing: &str) -> String {
        let lower = framing.to_lowercase();
        let mut fields = serde_json::Map::new();
        for rule in &self.dramaturgy {
            if rule.keywords.iter().any(|k| lower.contains(&k.to_lowercase())) {
                for (k, v) in &rule.fields {
                    fields.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
        }
        fields.insert("questions".into(), json!([]));
        Value::Object(fields).to_string()
    }

    fn clarify(&self, user: &str) -> Result<String, ProviderError> {
        // the user payload is {"field": .., "answer": ..}
        let v: Value = serde_json::from_str(user)
            .map_err(|e| ProviderError::Transport(format!("mock clarification payload: {e}")))?;
        let field = v["field"].as_str().unwrap_or("reaction_pattern");
        let answer = v["answer"].as_str().unwrap_or_default();
        Ok(json!({ field: answer }).to_string())
    }

    fn translate(&self, instruction: &str) -> String {
        let lower = instruction.to_lowercase();
        self.translation
            .iter()
            .find(|r| matches_all(&r.keywords, &lower))
            .map(|r| r.command.clone())
            .unwrap_or_else(|| "unrecognised instruction".to_string())
    }
}

impl LanguageModelProvider for MockProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let haystack = format!("{}\n{}", request.system, request.user).to_lowercase();
        if let Some(reply) = self.table_reply(request.contract, &haystack) {
            return Ok(reply);
        }
        match request.contract {
            ReplyContract::Decision => Err(ProviderError::Config("no default decision entry".into())),
            ReplyContract::Extraction => Ok(self.extract(&request.user)),
            ReplyContract::Clarification => self.clarify(&request.user),
            ReplyContract::Translation => Ok(self.translate(&request.user)),
            ReplyContract::Summary => Ok(json!({ "note": request.user.trim() }).to_string()),
        }
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSettings {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Chat-completion HTTP client: one system message and one user message.
pub struct RemoteProvider {
    settings: RemoteSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(settings: RemoteSettings) -> Result<Self, ProviderError> {
        let api_key = match &settings.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(settings.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            settings,
            api_key,
            agent,
        })
    }

    pub fn request_body(&self, request: &ProviderRequest) -> Value {
        json!({
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        })
    }
}

impl LanguageModelProvider for RemoteProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(self.request_body(request).to_string())
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("HTTP {status}: {body}")));
        }
        let v: Value =
            serde_json::from_str(&body).map_err(|e| ProviderError::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Transport("response has no choices[0].message.content".into()))
    }

    fn name(&self) -> &str {
        "remote"
    }
}

/// Wraps a provider with a fixed artificial latency.
pub struct Delayed<P> {
    pub inner: P,
    pub delay: Duration,
}

impl<P: LanguageModelProvider> LanguageModelProvider for Delayed<P> {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        std::thread::sleep(self.delay);
        self.inner.complete(request)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Always fails; stands in for a disabled or unreachable provider.
#[derive(Debug, Default, Clone, Copy)]
pub struct Unavailable;

impl LanguageModelProvider for Unavailable {
    fn complete(&self, _request: &ProviderRequest) -> Result<String, ProviderError> {
        Err(ProviderError::Transport("provider disabled".into()))
    }

    fn name(&self) -> &str {
        "unavailable"
    }
}

/// Substitutes `{KEY}` placeholders.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}
