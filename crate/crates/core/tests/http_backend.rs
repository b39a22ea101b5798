//! The chat-completions client against a local stub server.

mod common;

use std::collections::BTreeSet;
use std::sync::atomic::Ordering;
use std::time::Duration;

use recrag::gateway::{complete, BackendError, ChatCompletionsBackend, HttpBackendConfig, RateLimiter, RetryPolicy};
use recrag::promptgen::{RenderedPrompt, Strategy};

fn prompt() -> RenderedPrompt {
    RenderedPrompt {
        strategy: Strategy::Reasoning,
        text: "Which 10 movies?".into(),
        candidate_items: BTreeSet::new(),
        token_estimate: 4,
        target: 0,
        k: 10,
        fraction: 1.0,
    }
}

fn backend(base_url: &str, transcript: Option<std::path::PathBuf>) -> ChatCompletionsBackend {
    let config = HttpBackendConfig {
        base_url: base_url.to_string(),
        model: "stub-model".into(),
        transcript,
        ..Default::default()
    };
    ChatCompletionsBackend::with_key(config, "sk-secret-value".into()).unwrap()
}

fn policy() -> RetryPolicy {
    RetryPolicy {
        timeout: Duration::from_secs(5),
        backoff_base: Duration::from_millis(5),
        ..Default::default()
    }
}

#[test]
fn rate_limit_then_success_is_retried() {
    let server = common::stub_server(vec![
        (429, r#"{"error":{"message":"slow down"}}"#.into()),
        (200, common::chat_body("M3, M9, M1")),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("transcript.jsonl");
    let b = backend(&server.base_url, Some(transcript.clone()));
    let result = complete(&prompt(), &b, &policy(), &RateLimiter::unlimited()).unwrap();
    assert_eq!(result.text, "M3, M9, M1");
    assert_eq!(result.attempts, 2);
    assert_eq!(result.prompt_tokens, Some(321));
    assert_eq!(server.served.load(Ordering::SeqCst), 2);

    let requests = server.requests.lock().unwrap();
    let first = &requests[0];
    assert!(first.starts_with("POST /v1/chat/completions"));
    assert!(first.to_ascii_lowercase().contains("authorization: bearer sk-secret-value"));
    let body: serde_json::Value = serde_json::from_str(&first[first.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["content"], "Which 10 movies?");

    let log = std::fs::read_to_string(transcript).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(!log.contains("sk-secret-value"));
    assert!(!format!("{b:?}").contains("sk-secret-value"));
}

#[test]
fn auth_failure_is_not_retried_and_aborts() {
    let server = common::stub_server(vec![(401, r#"{"error":{"message":"bad key"}}"#.into())]);
    let err = complete(&prompt(), &backend(&server.base_url, None), &policy(), &RateLimiter::unlimited()).unwrap_err();
    assert_eq!(err, BackendError::Auth { status: 401 });
    assert!(err.aborts_run());
    assert_eq!(server.served.load(Ordering::SeqCst), 1);
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let server = common::stub_server(vec![(503, r#"{"error":{"message":"overloaded"}}"#.into())]);
    let p = RetryPolicy { max_retries: 2, ..policy() };
    let err = complete(&prompt(), &backend(&server.base_url, None), &p, &RateLimiter::unlimited()).unwrap_err();
    match err {
        BackendError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert_eq!(*last, BackendError::Server { status: 503, message: "overloaded".into() });
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.served.load(Ordering::SeqCst), 3);
}

#[test]
fn malformed_success_body_is_reported() {
    let server = common::stub_server(vec![(200, "{not json".into())]);
    let err = complete(&prompt(), &backend(&server.base_url, None), &policy(), &RateLimiter::unlimited()).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err:?}");
}

#[test]
fn closed_port_is_unreachable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(&format!("http://127.0.0.1:{port}/v1"), None);
    let p = RetryPolicy { max_retries: 1, ..policy() };
    let err = complete(&prompt(), &b, &p, &RateLimiter::unlimited()).unwrap_err();
    assert!(err.aborts_run(), "{err:?}");
}
