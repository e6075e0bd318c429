use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, BackendResponse, Usage};

pub const ENV_ENDPOINT: &str = "GDO_ENDPOINT";
pub const ENV_API_KEY: &str = "GDO_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total transport calls allowed per completion (at least 1).
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 200,
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `attempt + 1`: uniform in
    /// `[0, base * 2^attempt]` milliseconds.
    pub fn backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let cap = self
            .base_backoff_ms
            .saturating_mul(1u64.checked_shl(attempt).unwrap_or(u64::MAX));
        Duration::from_millis(rng.random_range(0..=cap))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireResponse {
    pub text: String,
    pub usage: Usage,
}

enum Attempt {
    Done(BackendResponse),
    Retry(String),
    Fatal(BackendError),
}

/// HTTP client for the `POST {endpoint}/v1/complete` protocol.
pub struct RemoteBackend {
    url: String,
    api_key: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
    transport_calls: AtomicU64,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, api_key: impl Into<String>, timeout_ms: u64, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/v1/complete", endpoint.trim_end_matches('/')),
            api_key: api_key.into(),
            retry: RetryPolicy {
                max_attempts: retry.max_attempts.max(1),
                ..retry
            },
            agent,
            transport_calls: AtomicU64::new(0),
        }
    }

    /// Endpoint and key from `GDO_ENDPOINT` / `GDO_API_KEY`.
    pub fn from_env(timeout_ms: u64, retry: RetryPolicy) -> Result<Self, String> {
        let endpoint =
            std::env::var(ENV_ENDPOINT).map_err(|_| format!("{ENV_ENDPOINT} is not set"))?;
        let key = std::env::var(ENV_API_KEY).unwrap_or_default();
        Ok(Self::new(&endpoint, key, timeout_ms, retry))
    }

    /// HTTP requests sent so far, across all completions.
    pub fn transport_calls(&self) -> u64 {
        self.transport_calls.load(Ordering::SeqCst)
    }

    fn attempt(&self, request: &BackendRequest, body: &WireRequest) -> Attempt {
        self.transport_calls.fetch_add(1, Ordering::SeqCst);
        let key = request.cache_key();
        let started = Instant::now();
        let mut response = match self
            .agent
            .post(&self.url)
            .header("authorization", format!("Bearer {}", self.api_key))
            .send_json(body)
        {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string();
        if status == 429 || (500..600).contains(&status) {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if status != 200 {
            return Attempt::Fatal(BackendError::Unavailable {
                key,
                reason: format!("HTTP {status} (not retried)"),
                retryable: false,
            });
        }
        let text = match text {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match serde_json::from_str::<WireResponse>(&text) {
            Ok(wire) => Attempt::Done(BackendResponse {
                text: wire.text,
                usage: wire.usage,
                latency_ms: started.elapsed().as_millis() as u64,
                cached: false,
                notes: Vec::new(),
            }),
            Err(e) => Attempt::Fatal(BackendError::Protocol {
                key,
                reason: format!("response body: {e}"),
            }),
        }
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        request.validate()?;
        let body = WireRequest {
            model: request.model_id.clone(),
            prompt: request.prompt.clone(),
            temperature: request.decode.temperature,
            max_tokens: request.decode.max_tokens,
            seed: request.decode.seed,
        };
        let mut rng = rand::rng();
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1, &mut rng));
            }
            match self.attempt(request, &body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => last = reason,
            }
        }
        Err(BackendError::Unavailable {
            key: request.cache_key(),
            reason: format!("{last} after {} attempt(s)", self.retry.max_attempts),
            retryable: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn backoff_is_bounded_by_exponential_cap() {
        let policy = RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 10,
        };
        let mut rng = StdRng::seed_from_u64(7);
        for attempt in 0..5 {
            for _ in 0..200 {
                let d = policy.backoff(attempt, &mut rng);
                assert!(d <= Duration::from_millis(10 << attempt));
            }
        }
        let huge = RetryPolicy {
            max_attempts: 1,
            base_backoff_ms: u64::MAX,
        };
        huge.backoff(70, &mut rng);
    }

    #[test]
    fn wire_format() {
        let body = WireRequest {
            model: "m".into(),
            prompt: "p".into(),
            temperature: 0.0,
            max_tokens: 16,
            seed: None,
        };
        assert_eq!(
            serde_json::to_string(&body).unwrap(),
            r#"{"model":"m","prompt":"p","temperature":0.0,"max_tokens":16,"seed":null}"#
        );
        let resp: WireResponse =
            serde_json::from_str(r#"{"text":"x","usage":{"prompt_tokens":3,"completion_tokens":1}}"#).unwrap();
        assert_eq!(resp.usage.prompt_tokens, 3);
    }

    #[test]
    fn unreachable_endpoint_exhausts_attempts() {
        // a just-released port refuses connections
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend = RemoteBackend::new(
            &format!("http://{addr}"),
            "k",
            500,
            RetryPolicy { max_attempts: 2, base_backoff_ms: 1 },
        );
        let err = backend.complete(&BackendRequest::new("m", "p")).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable { retryable: true, .. }), "{err}");
        assert_eq!(backend.transport_calls(), 2);
    }
}
