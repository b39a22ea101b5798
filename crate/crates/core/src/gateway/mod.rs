//! Chat-completion dispatch: backends, retry policy, rate limiting and
//! recommendation parsing.

mod http;
mod mock;
mod parse;

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::promptgen::RenderedPrompt;

pub use http::{interpret_response, ChatCompletionsBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockContext, MockKind};
pub use parse::{parse_recommendations, ParsedRecommendation};

/// Failure taxonomy for a single request attempt.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("authentication failed ({status})")]
    Auth { status: u16 },
    #[error("request rejected {status}: {message}")]
    BadRequest { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: Box<BackendError> },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited { .. }
                | BackendError::Server { .. }
                | BackendError::Timeout
                | BackendError::Unreachable(_)
        )
    }

    /// Errors that mean the whole run should stop rather than record a
    /// failed trial.
    pub fn aborts_run(&self) -> bool {
        match self {
            BackendError::Unreachable(_) | BackendError::Auth { .. } | BackendError::Config(_) => true,
            BackendError::RetriesExhausted { last, .. } => last.aborts_run(),
            _ => false,
        }
    }
}

/// What a backend returns for one successful attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub prompt_tokens: Option<usize>,
    pub completion_tokens: Option<usize>,
    /// Backends with a simulated clock report their own latency.
    pub simulated_latency: Option<Duration>,
}

pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;

    fn send(&self, prompt: &RenderedPrompt, timeout: Duration) -> Result<RawCompletion, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    /// Request send through response receipt, including retries.
    pub latency: Duration,
    pub prompt_tokens: Option<usize>,
    pub completion_tokens: Option<usize>,
    pub backend_id: String,
    pub attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    #[serde(with = "millis", rename = "timeout_ms")]
    pub timeout: Duration,
    pub max_retries: usize,
    #[serde(with = "millis", rename = "backoff_base_ms")]
    pub backoff_base: Duration,
    pub backoff_factor: f64,
    /// Uniform jitter added to each delay, as a fraction of that delay.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            backoff_factor: 2.0,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), without jitter.
    pub fn base_delay(&self, retry: usize) -> Duration {
        self.backoff_base.mul_f64(self.backoff_factor.powi(retry as i32))
    }

    fn delay_with_jitter(&self, retry: usize, hint: Option<Duration>) -> Duration {
        let base = self.base_delay(retry).max(hint.unwrap_or_default());
        if self.jitter <= 0.0 || base.is_zero() {
            return base;
        }
        base + base.mul_f64(rand::thread_rng().gen_range(0.0..self.jitter))
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Enforces a minimum spacing between request starts across threads.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            next_slot: Mutex::new(None),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(Duration::ZERO)
    }

    pub fn acquire(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut slot = self.next_slot.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + self.min_interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Sends `prompt`, retrying retryable failures with exponential backoff.
pub fn complete(
    prompt: &RenderedPrompt,
    backend: &dyn CompletionBackend,
    policy: &RetryPolicy,
    limiter: &RateLimiter,
) -> Result<CompletionResult, BackendError> {
    if policy.timeout.is_zero() {
        return Err(BackendError::Timeout);
    }
    let started = Instant::now();
    let mut attempts = 0;
    loop {
        limiter.acquire();
        attempts += 1;
        match backend.send(prompt, policy.timeout) {
            Ok(raw) => {
                return Ok(CompletionResult {
                    text: raw.text,
                    latency: raw.simulated_latency.unwrap_or_else(|| started.elapsed()),
                    prompt_tokens: raw.prompt_tokens,
                    completion_tokens: raw.completion_tokens,
                    backend_id: backend.id().to_string(),
                    attempts,
                });
            }
            Err(err) if err.is_retryable() && attempts <= policy.max_retries => {
                let hint = match &err {
                    BackendError::RateLimited { retry_after } => *retry_after,
                    _ => None,
                };
                thread::sleep(policy.delay_with_jitter(attempts - 1, hint));
            }
            Err(err) if err.is_retryable() => {
                return Err(BackendError::RetriesExhausted {
                    attempts,
                    last: Box::new(err),
                });
            }
            Err(err) => return Err(err),
        }
    }
}
