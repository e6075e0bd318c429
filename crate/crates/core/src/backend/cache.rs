use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, BackendResponse, CacheKey, Usage};

/// Key-value storage for cached responses.
pub trait CacheStore: Send + Sync {
    fn get(&self, key: &CacheKey) -> io::Result<Option<BackendResponse>>;
    fn put(&self, key: &CacheKey, response: &BackendResponse) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    map: RwLock<HashMap<CacheKey, BackendResponse>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CacheStore for MemoryStore {
    fn get(&self, key: &CacheKey) -> io::Result<Option<BackendResponse>> {
        Ok(self.map.read().expect("cache lock").get(key).cloned())
    }

    fn put(&self, key: &CacheKey, response: &BackendResponse) -> io::Result<()> {
        self.map
            .write()
            .expect("cache lock")
            .insert(*key, response.clone());
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"GDOCACH1";

#[derive(Serialize, Deserialize)]
struct StoredResponse {
    text: String,
    usage: Usage,
    latency_ms: u64,
    #[serde(default)]
    notes: Vec<String>,
}

/// Append-only cache file.
///
/// Layout: an 8-byte magic, then records of `key (32 bytes) | len (u32 LE) |
/// len bytes of JSON`. A torn trailing record from an interrupted write is
/// dropped on open. Later records for the same key win.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    map: RwLock<HashMap<CacheKey, BackendResponse>>,
    file: Mutex<File>,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut map = HashMap::new();
        if bytes.is_empty() {
            file.write_all(MAGIC)?;
        } else {
            if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{} is not a response cache file", path.display()),
                ));
            }
            let mut pos = MAGIC.len();
            while let Some((key, response, next)) = decode_record(&bytes, pos) {
                map.insert(key, response);
                pos = next;
            }
            if pos < bytes.len() {
                file.set_len(pos as u64)?;
            }
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            path,
            map: RwLock::new(map),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn decode_record(bytes: &[u8], pos: usize) -> Option<(CacheKey, BackendResponse, usize)> {
    let header_end = pos.checked_add(36)?;
    let header = bytes.get(pos..header_end)?;
    let key = CacheKey(header[..32].try_into().ok()?);
    let len = u32::from_le_bytes(header[32..36].try_into().ok()?) as usize;
    let body = bytes.get(header_end..header_end.checked_add(len)?)?;
    let stored: StoredResponse = serde_json::from_slice(body).ok()?;
    let response = BackendResponse {
        text: stored.text,
        usage: stored.usage,
        latency_ms: stored.latency_ms,
        cached: false,
        notes: stored.notes,
    };
    Some((key, response, header_end + len))
}

impl CacheStore for FileStore {
    fn get(&self, key: &CacheKey) -> io::Result<Option<BackendResponse>> {
        Ok(self.map.read().expect("cache lock").get(key).cloned())
    }

    fn put(&self, key: &CacheKey, response: &BackendResponse) -> io::Result<()> {
        let body = serde_json::to_vec(&StoredResponse {
            text: response.text.clone(),
            usage: response.usage,
            latency_ms: response.latency_ms,
            notes: response.notes.clone(),
        })?;
        let len = u32::try_from(body.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "response too large"))?;
        let mut record = Vec::with_capacity(36 + body.len());
        record.extend_from_slice(&key.0);
        record.extend_from_slice(&len.to_le_bytes());
        record.extend_from_slice(&body);
        {
            let mut file = self.file.lock().expect("cache file lock");
            file.write_all(&record)?;
            file.flush()?;
        }
        self.map
            .write()
            .expect("cache lock")
            .insert(*key, response.clone());
        Ok(())
    }
}

const STRIPES: usize = 64;

/// Serves repeated requests from a store.
///
/// Lookups for one key are serialized (striped locks), so concurrent
/// identical requests reach the inner backend once. Responses whose text
/// starts with `ERROR:` are never stored.
pub struct CachedBackend<B, S> {
    inner: B,
    store: S,
    stripes: Vec<Mutex<()>>,
}

impl<B: Backend, S: CacheStore> CachedBackend<B, S> {
    pub fn new(inner: B, store: S) -> Self {
        Self {
            inner,
            store,
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn store(&self) -> &S {
        &self.store
    }
}

fn store_error(key: CacheKey, e: io::Error) -> BackendError {
    BackendError::Unavailable {
        key,
        reason: format!("cache store: {e}"),
        retryable: false,
    }
}

impl<B: Backend, S: CacheStore> Backend for CachedBackend<B, S> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let key = request.cache_key();
        let _guard = self.stripes[key.0[0] as usize % STRIPES]
            .lock()
            .expect("cache stripe lock");
        if let Some(mut hit) = self.store.get(&key).map_err(|e| store_error(key, e))? {
            hit.cached = true;
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        if !response.is_error() {
            self.store.put(&key, &response).map_err(|e| store_error(key, e))?;
        }
        Ok(response)
    }

    fn complete_uncached(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.inner.complete_uncached(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Echo backend that counts calls; prompts starting with "bad" fail in-band.
    #[derive(Default)]
    struct Counting {
        calls: AtomicUsize,
    }

    impl Backend for Counting {
        fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if request.prompt.starts_with("bad") {
                return Ok(BackendResponse::text("ERROR: no"));
            }
            Ok(BackendResponse::text(format!("echo {}", request.prompt)))
        }
    }

    #[test]
    fn hit_returns_same_text() {
        let backend = CachedBackend::new(Counting::default(), MemoryStore::new());
        let req = BackendRequest::new("m", "p");
        let first = backend.complete(&req).unwrap();
        let second = backend.complete(&req).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(backend.inner().calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn duplicated_prompts_reach_inner_once_each() {
        let backend = CachedBackend::new(Counting::default(), MemoryStore::new());
        for round in 0..10 {
            for i in 0..100 {
                let resp = backend.complete(&BackendRequest::new("m", format!("p{i}"))).unwrap();
                assert_eq!(resp.cached, round > 0);
            }
        }
        assert_eq!(backend.inner().calls.load(Ordering::SeqCst), 100);
    }

    #[test]
    fn errors_are_not_cached() {
        let backend = CachedBackend::new(Counting::default(), MemoryStore::new());
        let req = BackendRequest::new("m", "bad");
        assert!(backend.complete(&req).unwrap().is_error());
        assert!(!backend.complete(&req).unwrap().cached);
        assert_eq!(backend.inner().calls.load(Ordering::SeqCst), 2);
        assert!(backend.store().is_empty());
    }

    #[test]
    fn uncached_path_skips_store() {
        let backend = CachedBackend::new(Counting::default(), MemoryStore::new());
        let req = BackendRequest::new("m", "p");
        backend.complete(&req).unwrap();
        assert!(!backend.complete_uncached(&req).unwrap().cached);
        assert_eq!(backend.inner().calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn concurrent_identical_requests_single_flight() {
        let backend = CachedBackend::new(Counting::default(), MemoryStore::new());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for i in 0..50 {
                        backend.complete(&BackendRequest::new("m", format!("p{i}"))).unwrap();
                    }
                });
            }
        });
        assert_eq!(backend.inner().calls.load(Ordering::SeqCst), 50);
    }

    #[test]
    fn file_store_survives_reopen_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let req = BackendRequest::new("m", "p");
        {
            let backend = CachedBackend::new(Counting::default(), FileStore::open(&path).unwrap());
            backend.complete(&req).unwrap();
        }
        // simulate a crash mid-append
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[1, 2, 3]).unwrap();
        drop(f);

        let store = FileStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        let backend = CachedBackend::new(Counting::default(), store);
        let resp = backend.complete(&req).unwrap();
        assert!(resp.cached);
        assert_eq!(resp.text, "echo p");
        assert_eq!(backend.inner().calls.load(Ordering::SeqCst), 0);

        backend.complete(&BackendRequest::new("m", "q")).unwrap();
        drop(backend);
        assert_eq!(FileStore::open(&path).unwrap().len(), 2);
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"not a cache").unwrap();
        assert!(FileStore::open(&path).is_err());
    }
}
