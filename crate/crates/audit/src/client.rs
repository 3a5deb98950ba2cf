//! Client for an OpenAI-compatible chat completions endpoint.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_BASE_URL: &str = "AUDITOR_BASE_URL";
pub const ENV_API_KEY: &str = "AUDITOR_API_KEY";
pub const ENV_MODEL: &str = "AUDITOR_MODEL";

/// The user turn sent after the system prompt.
pub const USER_MESSAGE: &str = "Audit the patient record above and reply with the JSON object only.";

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditorConfig {
    pub base_url: String,
    #[serde(skip)]
    pub api_key: String,
    pub model_name: String,
    pub temperature: f64,
    pub timeout_seconds: f64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    /// First backoff delay; doubles on each retry.
    pub backoff_seconds: f64,
}

impl Default for AuditorConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key: String::new(),
            model_name: "auditor".into(),
            temperature: 0.0,
            timeout_seconds: 120.0,
            max_retries: 3,
            max_concurrency: 4,
            backoff_seconds: 1.0,
        }
    }
}

impl fmt::Debug for AuditorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditorConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &if self.api_key.is_empty() { "" } else { "<redacted>" })
            .field("model_name", &self.model_name)
            .field("temperature", &self.temperature)
            .field("timeout_seconds", &self.timeout_seconds)
            .field("max_retries", &self.max_retries)
            .field("max_concurrency", &self.max_concurrency)
            .field("backoff_seconds", &self.backoff_seconds)
            .finish()
    }
}

impl AuditorConfig {
    /// Overrides endpoint, key and model from the `AUDITOR_*` variables.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var(ENV_BASE_URL) {
            self.base_url = v;
        }
        if let Ok(v) = std::env::var(ENV_API_KEY) {
            self.api_key = v;
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            self.model_name = v;
        }
        self
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        if self.max_concurrency == 0 {
            return Err(AuditError::Config("max_concurrency must be at least 1".into()));
        }
        if !(self.timeout_seconds > 0.0) || !(self.backoff_seconds >= 0.0) {
            return Err(AuditError::Config("timeout must be positive and backoff non-negative".into()));
        }
        if self.base_url.is_empty() {
            return Err(AuditError::Config("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_seconds * 2f64.powi(retry as i32))
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid auditor config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unparseable reply: {0}")]
    Parse(String),
    #[error("invalid reply: {0}")]
    Validation(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<AuditError> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub record_id: String,
    pub realism_score: u8,
    pub reasoning: String,
    pub raw_response: String,
    /// Requests issued, including the successful one.
    pub attempts: u32,
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses the first JSON object in a reply, fenced or not, and checks the
/// score is an integer from 1 to 10.
pub fn parse_reply(content: &str) -> Result<(u8, String), AuditError> {
    let body = strip_fences(content);
    let start = body.find('{').ok_or_else(|| AuditError::Parse("no JSON object".into()))?;
    let value: Value = serde_json::Deserializer::from_str(&body[start..])
        .into_iter::<Value>()
        .next()
        .ok_or_else(|| AuditError::Parse("no JSON object".into()))?
        .map_err(|e| AuditError::Parse(e.to_string()))?;
    let score = value
        .get("realism_score")
        .ok_or_else(|| AuditError::Validation("missing realism_score".into()))?;
    let score = score
        .as_i64()
        .ok_or_else(|| AuditError::Validation(format!("realism_score {score} is not an integer")))?;
    if !(1..=10).contains(&score) {
        return Err(AuditError::Validation(format!("realism_score {score} outside 1-10")));
    }
    let reasoning = value
        .get("reasoning")
        .and_then(Value::as_str)
        .ok_or_else(|| AuditError::Validation("missing reasoning".into()))?;
    Ok((score as u8, reasoning.to_string()))
}

/// A configured client; reuses one connection pool across calls.
pub struct Auditor {
    cfg: AuditorConfig,
    agent: ureq::Agent,
}

impl Auditor {
    pub fn new(cfg: AuditorConfig) -> Result<Self, AuditError> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    pub fn config(&self) -> &AuditorConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, prompt: &str) -> Result<(u8, String, String), AuditError> {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": prompt},
                {"role": "user", "content": USER_MESSAGE},
            ],
            "temperature": self.cfg.temperature,
        });
        let mut req = self.agent.post(&self.endpoint());
        if !self.cfg.api_key.is_empty() {
            req = req.header("Authorization", format!("Bearer {}", self.cfg.api_key));
        }
        let mut resp = req.send_json(&body).map_err(|e| AuditError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AuditError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(AuditError::Status { status, body: text });
        }
        let reply: Value = serde_json::from_str(&text).map_err(|e| AuditError::Parse(e.to_string()))?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| AuditError::Parse("missing choices[0].message.content".into()))?;
        let (score, reasoning) = parse_reply(content)?;
        Ok((score, reasoning, content.to_string()))
    }

    /// Scores one prompt, retrying failed attempts with exponential
    /// backoff. Issues at most `1 + max_retries` requests.
    pub fn call(&self, record_id: &str, prompt: &str) -> Result<AuditResult, AuditError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(prompt) {
                Ok((realism_score, reasoning, raw_response)) => {
                    return Ok(AuditResult {
                        record_id: record_id.to_string(),
                        realism_score,
                        reasoning,
                        raw_response,
                        attempts,
                    })
                }
                Err(e) if attempts > self.cfg.max_retries => {
                    return Err(AuditError::Exhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => {
                    log::warn!("audit of {record_id} failed (attempt {attempts}): {e}");
                    std::thread::sleep(self.cfg.backoff(attempts - 1));
                }
            }
        }
    }
}

pub fn call_auditor(cfg: &AuditorConfig, record_id: &str, prompt: &str) -> Result<AuditResult, AuditError> {
    Auditor::new(cfg.clone())?.call(record_id, prompt)
}
