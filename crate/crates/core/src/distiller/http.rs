//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, ChatMessage, ChatRequest, ChatResponse, LlmBackend};

pub const API_KEY_ENV: &str = "GRANARY_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "deepseek-reasoner".into(),
            timeout_secs: 600,
        }
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    seed: u64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    /// Reasoning models served through some gateways return the chain of
    /// thought here instead of inline `<think>` tags.
    #[serde(default)]
    reasoning_content: Option<String>,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Reads the bearer token from `GRANARY_API_KEY` if set.
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpBackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Permanent(format!("http client: {e}")))?;
        Ok(HttpBackend {
            config,
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.temperature,
            seed: request.seed,
            max_tokens: request.max_tokens,
        };
        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Permanent(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Permanent(format!("HTTP {status}: {text}")));
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Permanent(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Permanent("response has no choices".into()))?;
        let mut content = choice.message.content.unwrap_or_default();
        if let Some(reasoning) = choice.message.reasoning_content.filter(|r| !r.trim().is_empty()) {
            if !content.contains("</think>") {
                content = format!("<think>\n{}\n</think>\n\n{}", reasoning.trim(), content);
            }
        }
        Ok(ChatResponse {
            content,
            finish_reason: choice.finish_reason.unwrap_or_else(|| "unknown".into()),
        })
    }

    fn supports_seed(&self) -> bool {
        true
    }
}
