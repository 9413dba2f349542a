use std::fmt;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Which pipeline agent issued a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Question,
    Answer,
    Postprocess,
    Evaluation,
}

/// Routing metadata carried alongside a request. Never sent over the wire;
/// offline backends and transcripts use it to attribute calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub agent: Option<Agent>,
    /// 1-based position of the (node, sample) task in canonical order.
    pub task_ordinal: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
    #[serde(skip)]
    pub meta: RequestMeta,
}

impl ChatRequest {
    pub fn new(system: Option<&str>, user: impl Into<String>) -> Self {
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(ChatMessage::system(s));
        }
        messages.push(ChatMessage::user(user));
        ChatRequest {
            messages,
            temperature: 0.0,
            seed: 0,
            max_tokens: 4096,
            meta: RequestMeta::default(),
        }
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, rate limits, 5xx.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Permanent(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

/// Anything that answers chat-completion requests.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    fn supports_seed(&self) -> bool {
        false
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn supports_seed(&self) -> bool {
        (**self).supports_seed()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn supports_seed(&self) -> bool {
        (**self).supports_seed()
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 500,
            max_backoff_ms: 30_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_backoff_ms: 0,
            max_backoff_ms: 0,
            jitter: false,
        }
    }

    /// Upper bound of the wait before retry number `retry` (0-based).
    pub fn backoff_cap(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        let ms = self
            .base_backoff_ms
            .saturating_mul(factor)
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    fn delay(&self, retry: u32) -> Duration {
        let cap = self.backoff_cap(retry);
        if !self.jitter || cap.is_zero() {
            return cap;
        }
        let ms = rand::rng().random_range(0..=cap.as_millis() as u64);
        Duration::from_millis(ms)
    }
}

/// Call `backend`, retrying transient failures per `policy`.
pub fn complete_with_retry(
    backend: &dyn LlmBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<ChatResponse, BackendError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        match backend.complete(request) {
            Ok(resp) => return Ok(resp),
            Err(BackendError::Transient(msg)) => {
                log::debug!("attempt {} failed: {msg}", attempt + 1);
                last = msg;
                if attempt + 1 < attempts {
                    std::thread::sleep(policy.delay(attempt));
                }
            }
            Err(other) => return Err(other),
        }
    }
    Err(BackendError::Exhausted { attempts, last })
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        fail_first: u32,
        calls: AtomicU32,
        permanent: bool,
    }

    impl LlmBackend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.permanent {
                return Err(BackendError::Permanent("401".into()));
            }
            if n < self.fail_first {
                Err(BackendError::Transient("503".into()))
            } else {
                Ok(ChatResponse {
                    content: "ok".into(),
                    finish_reason: "stop".into(),
                })
            }
        }
    }

    fn flaky(fail_first: u32, permanent: bool) -> Flaky {
        Flaky {
            fail_first,
            calls: AtomicU32::new(0),
            permanent,
        }
    }

    #[test]
    fn retries_transient_until_success() {
        let b = flaky(3, false);
        let req = ChatRequest::new(None, "hi");
        let r = complete_with_retry(&b, &req, &RetryPolicy::no_wait(5)).unwrap();
        assert_eq!(r.content, "ok");
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let b = flaky(10, false);
        let req = ChatRequest::new(None, "hi");
        let err = complete_with_retry(&b, &req, &RetryPolicy::no_wait(5)).unwrap_err();
        assert_eq!(
            err,
            BackendError::Exhausted {
                attempts: 5,
                last: "503".into()
            }
        );
        assert_eq!(b.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let b = flaky(0, true);
        let req = ChatRequest::new(None, "hi");
        assert!(matches!(
            complete_with_retry(&b, &req, &RetryPolicy::no_wait(5)),
            Err(BackendError::Permanent(_))
        ));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            base_backoff_ms: 100,
            max_backoff_ms: 1000,
            ..Default::default()
        };
        assert_eq!(p.backoff_cap(0), Duration::from_millis(100));
        assert_eq!(p.backoff_cap(2), Duration::from_millis(400));
        assert_eq!(p.backoff_cap(10), Duration::from_millis(1000));
        assert_eq!(p.backoff_cap(200), Duration::from_millis(1000));
    }

    #[test]
    fn request_accessors() {
        let r = ChatRequest::new(Some("sys"), "u");
        assert_eq!(r.system_prompt(), Some("sys"));
        assert_eq!(r.last_user(), Some("u"));
        assert_eq!(ChatRequest::new(None, "u").system_prompt(), None);
    }
}
