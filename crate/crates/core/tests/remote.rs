use gdo::backend::stub::StubServer;
use gdo::backend::{Backend, BackendError, BackendRequest, MockBackend, RemoteBackend, RetryPolicy};

fn fixture() -> MockBackend {
    MockBackend::new([("Date: 2021-01-02".to_string(), vec!["20210102".to_string()])].into()).unwrap()
}

fn client(stub: &StubServer, key: &str, max_attempts: u32) -> RemoteBackend {
    RemoteBackend::new(&stub.endpoint(), key, 2_000, RetryPolicy { max_attempts, base_backoff_ms: 5 })
}

#[test]
fn happy_path_fills_response() {
    let stub = StubServer::start(fixture(), Some("secret")).unwrap();
    let backend = client(&stub, "secret", 3);
    let resp = backend.complete(&BackendRequest::new("m", "Date: 2021-01-02")).unwrap();
    assert_eq!(resp.text, "20210102");
    assert_eq!((resp.usage.prompt_tokens, resp.usage.completion_tokens), (2, 1));
    assert!(!resp.cached);
    assert_eq!(backend.transport_calls(), 1);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let stub = StubServer::start(fixture(), None).unwrap();
    stub.script([500, 500]);
    let backend = client(&stub, "", 3);
    let resp = backend.complete(&BackendRequest::new("m", "Date: 2021-01-02")).unwrap();
    assert_eq!(resp.text, "20210102");
    assert_eq!(backend.transport_calls(), 3);
    assert_eq!(stub.requests(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let stub = StubServer::start(fixture(), None).unwrap();
    stub.script([503, 429, 500, 500]);
    let backend = client(&stub, "", 3);
    let err = backend.complete(&BackendRequest::new("m", "Date: 2021-01-02")).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { retryable: true, .. }), "{err}");
    assert_eq!(backend.transport_calls(), 3);
}

#[test]
fn unauthorized_is_not_retried() {
    let stub = StubServer::start(fixture(), Some("secret")).unwrap();
    let backend = client(&stub, "wrong", 3);
    let err = backend.complete(&BackendRequest::new("m", "Date: 2021-01-02")).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { retryable: false, .. }), "{err}");
    assert!(err.to_string().contains("401"));
    assert_eq!(backend.transport_calls(), 1);
    assert_eq!(stub.requests(), 1);
}

#[test]
fn fixture_miss_is_not_retried() {
    let stub = StubServer::start(fixture(), None).unwrap();
    let backend = client(&stub, "", 3);
    assert!(backend.complete(&BackendRequest::new("m", "unknown")).is_err());
    assert_eq!(backend.transport_calls(), 1);
}
