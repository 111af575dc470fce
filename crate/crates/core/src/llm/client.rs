//! Blocking client for OpenAI-compatible `chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CompletionProvider, LlmError, RawCompletion, TokenLogprob};

pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const BASE_URL_ENV: &str = "LLM_BASE_URL";
pub const MODEL_ENV: &str = "LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpointConfig {
    /// Base URL such as `http://localhost:8000/v1`; `/chat/completions` is
    /// appended unless already present.
    pub url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl ChatEndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            max_tokens: 300,
            timeout_secs: 60,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }

    /// Reads URL and model from the environment when not given; the API key
    /// only ever comes from the environment.
    pub fn from_env(url: Option<String>, model: Option<String>) -> Result<Self, LlmError> {
        let url = url
            .or_else(|| std::env::var(BASE_URL_ENV).ok())
            .ok_or_else(|| LlmError::Config(format!("no endpoint URL (set {BASE_URL_ENV})")))?;
        let model = model
            .or_else(|| std::env::var(MODEL_ENV).ok())
            .ok_or_else(|| LlmError::Config(format!("no model name (set {MODEL_ENV})")))?;
        let mut cfg = Self::new(url, model);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct HttpChatClient {
    cfg: ChatEndpointConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(RawCompletion),
    Retry(String),
    Fatal(LlmError),
}

impl HttpChatClient {
    pub fn new(cfg: ChatEndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &ChatEndpointConfig {
        &self.cfg
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": self.cfg.max_tokens,
            "logprobs": true,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.cfg.endpoint());
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(LlmError::Backend { status, body: text });
        }
        match parse_chat_response(&text) {
            Ok(c) => Attempt::Done(c),
            Err(e) => Attempt::Fatal(e),
        }
    }

    /// One chat completion with greedy decoding, retried with exponential
    /// backoff on transport failures, 429 and 5xx responses.
    pub fn query(&self, prompt: &str) -> Result<RawCompletion, LlmError> {
        let body = self.request_body(prompt);
        let mut last = String::new();
        for attempt in 0..self.cfg.max_attempts.max(1) {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    log::warn!("LLM request attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(LlmError::Transport(format!(
            "{} attempts failed, last error: {last}",
            self.cfg.max_attempts.max(1)
        )))
    }
}

impl CompletionProvider for HttpChatClient {
    fn complete(&self, _topic_words: &[String], prompt: &str) -> Result<RawCompletion, LlmError> {
        self.query(prompt)
    }
}

/// Extracts text, finish reason and token log-probabilities from a chat
/// completion response. Both the chat (`logprobs.content[]`) and the legacy
/// (`logprobs.tokens` / `token_logprobs`) layouts are accepted.
pub fn parse_chat_response(body: &str) -> Result<RawCompletion, LlmError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| LlmError::Backend { status: 200, body: format!("invalid JSON: {e}") })?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Backend { status: 200, body: "response has no choices".into() })?;
    let text = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let tokens = choice.get("logprobs").and_then(parse_logprobs);
    Ok(RawCompletion {
        text,
        tokens,
        finish_reason,
    })
}

fn parse_logprobs(lp: &Value) -> Option<Vec<TokenLogprob>> {
    if let Some(content) = lp.get("content").and_then(Value::as_array) {
        return content
            .iter()
            .map(|t| {
                Some(TokenLogprob {
                    token: t.get("token")?.as_str()?.to_string(),
                    logprob: t.get("logprob")?.as_f64()?.min(0.0),
                })
            })
            .collect();
    }
    let tokens = lp.get("tokens")?.as_array()?;
    let lps = lp.get("token_logprobs")?.as_array()?;
    tokens
        .iter()
        .zip(lps)
        .map(|(t, l)| {
            Some(TokenLogprob {
                token: t.as_str()?.to_string(),
                logprob: l.as_f64()?.min(0.0),
            })
        })
        .collect()
}
