use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, RawCompletion};
use crate::promptgen::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Base URL up to and including the API version, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    /// Optional JSON-lines transcript of every request/response pair.
    pub transcript: Option<PathBuf>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4.1-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            transcript: None,
        }
    }
}

/// Client for the `/chat/completions` JSON wire format.
pub struct ChatCompletionsBackend {
    config: HttpBackendConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    transcript: Option<Mutex<File>>,
    id: String,
}

impl std::fmt::Debug for ChatCompletionsBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatCompletionsBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl ChatCompletionsBackend {
    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpBackendConfig, api_key: String) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let transcript = match &config.transcript {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| BackendError::Config(format!("transcript {}: {e}", path.display())))?,
            )),
            None => None,
        };
        Ok(Self {
            id: format!("chat:{}", config.model),
            config,
            api_key,
            client,
            transcript,
        })
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        })
    }

    fn record(&self, request: &Value, status: Option<u16>, response: &str, latency: Duration) {
        if let Some(file) = &self.transcript {
            let line = json!({
                "request": request,
                "status": status,
                "response": response,
                "latency_ms": latency.as_secs_f64() * 1000.0,
            });
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            let _ = writeln!(f, "{line}");
        }
    }
}

impl CompletionBackend for ChatCompletionsBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, prompt: &RenderedPrompt, timeout: Duration) -> Result<RawCompletion, BackendError> {
        let body = self.request_body(&prompt.text);
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let started = Instant::now();
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .timeout(timeout)
            .json(&body)
            .send();
        let response = match response {
            Ok(r) => r,
            Err(e) => {
                self.record(&body, None, &e.to_string(), started.elapsed());
                return Err(transport_error(&e));
            }
        };
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let text = response.text().map_err(|e| transport_error(&e))?;
        self.record(&body, Some(status), &text, started.elapsed());
        interpret_response(status, retry_after.as_deref(), &text)
    }
}

fn transport_error(e: &reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else if e.is_connect() {
        BackendError::Unreachable(e.to_string())
    } else if e.is_decode() || e.is_body() {
        BackendError::Malformed(e.to_string())
    } else {
        BackendError::Server {
            status: 0,
            message: e.to_string(),
        }
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_else(|| body.chars().take(200).collect())
}

/// Maps an HTTP status and body from a chat-completions endpoint onto the
/// backend error taxonomy.
pub fn interpret_response(status: u16, retry_after: Option<&str>, body: &str) -> Result<RawCompletion, BackendError> {
    match status {
        200..=299 => {
            let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
            let text = v
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
            let usage = |field: &str| {
                v.pointer(&format!("/usage/{field}"))
                    .and_then(Value::as_u64)
                    .map(|n| n as usize)
            };
            Ok(RawCompletion {
                text: text.to_string(),
                prompt_tokens: usage("prompt_tokens"),
                completion_tokens: usage("completion_tokens"),
                simulated_latency: None,
            })
        }
        429 => Err(BackendError::RateLimited {
            retry_after: retry_after
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64),
        }),
        401 | 403 => Err(BackendError::Auth { status }),
        408 => Err(BackendError::Timeout),
        500..=599 => Err(BackendError::Server {
            status,
            message: error_message(body),
        }),
        _ => Err(BackendError::BadRequest {
            status,
            message: error_message(body),
        }),
    }
}
