//! The `llm_call` gateway: one completion interface over mock, rule and
//! remote backends, plus a content-addressed response cache.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifest::Decoding;
use crate::oracle::OracleTag;

mod cache;
mod mock;
mod remote;
mod rule;
pub mod stub;

pub use cache::{CacheStore, CachedBackend, FileStore, MemoryStore};
pub use mock::MockBackend;
pub use remote::{RemoteBackend, RetryPolicy, ENV_API_KEY, ENV_ENDPOINT};
pub use rule::{RuleBackend, BUILTIN_TAXONOMY_ID, UNVERIFIED_NOTE};

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub model_id: String,
    pub prompt: String,
    /// Input cells in manifest order, as canonical text.
    pub structured_inputs: Vec<(String, String)>,
    pub oracle: Option<OracleTag>,
    pub params: BTreeMap<String, String>,
    pub decode: Decoding,
}

impl BackendRequest {
    /// A request with default decoding and no oracle.
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            structured_inputs: Vec::new(),
            oracle: None,
            params: BTreeMap::new(),
            decode: Decoding::default(),
        }
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey::of(self)
    }

    fn validate(&self) -> Result<(), BackendError> {
        let problem = if self.prompt.is_empty() {
            Some("empty prompt")
        } else if !(self.decode.temperature.is_finite() && self.decode.temperature >= 0.0) {
            Some("temperature must be >= 0")
        } else if self.decode.max_tokens == 0 {
            Some("max_tokens must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(BackendError::InvalidRequest {
                key: self.cache_key(),
                reason: p.to_string(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub cached: bool,
    /// Side-channel annotations (e.g. `unverified` from the classifier).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl BackendResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    pub fn is_error(&self) -> bool {
        self.text.starts_with("ERROR:")
    }
}

/// SHA-256 over the length-prefixed (model, prompt, decoding) triple.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn of(request: &BackendRequest) -> Self {
        Self::from_bytes(&Self::canonical_bytes(request))
    }

    fn from_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    /// Field-ordered, length-prefixed serialization; injective on the triple.
    pub fn canonical_bytes(request: &BackendRequest) -> Vec<u8> {
        fn field(out: &mut Vec<u8>, bytes: &[u8]) {
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        let mut out = Vec::with_capacity(request.prompt.len() + 96);
        field(&mut out, request.model_id.as_bytes());
        field(&mut out, request.prompt.as_bytes());
        field(&mut out, &request.decode.temperature.to_bits().to_le_bytes());
        field(&mut out, &u64::from(request.decode.max_tokens).to_le_bytes());
        match request.decode.seed {
            None => field(&mut out, &[]),
            Some(seed) => field(&mut out, &seed.to_le_bytes()),
        }
        out
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.to_hex())
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable (request {key}): {reason}")]
    Unavailable {
        key: CacheKey,
        reason: String,
        retryable: bool,
    },
    #[error("no fixture entry for request {key}")]
    FixtureMiss { key: CacheKey },
    #[error("rule backend needs a known oracle (request {key})")]
    UnknownOracle { key: CacheKey },
    #[error("protocol error (request {key}): {reason}")]
    Protocol { key: CacheKey, reason: String },
    #[error("invalid request {key}: {reason}")]
    InvalidRequest { key: CacheKey, reason: String },
    #[error("malformed fixture: {0}")]
    MalformedFixture(String),
}

impl BackendError {
    pub fn key(&self) -> Option<CacheKey> {
        match self {
            BackendError::Unavailable { key, .. }
            | BackendError::FixtureMiss { key }
            | BackendError::UnknownOracle { key }
            | BackendError::Protocol { key, .. }
            | BackendError::InvalidRequest { key, .. } => Some(*key),
            BackendError::MalformedFixture(_) => None,
        }
    }
}

/// Anything that can answer a formatted prompt.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;

    /// Like [`complete`](Backend::complete) but never served from a cache.
    fn complete_uncached(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }

    fn complete_uncached(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete_uncached(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }

    fn complete_uncached(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete_uncached(request)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }

    fn complete_uncached(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete_uncached(request)
    }
}
