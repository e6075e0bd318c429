//! Minimal HTTP/1.1 server speaking the completion protocol over a mock
//! fixture. Used by integration tests of the remote backend.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::remote::{WireRequest, WireResponse};
use super::{Backend, BackendError, BackendRequest, MockBackend, Usage};
use crate::manifest::Decoding;

struct Shared {
    fixture: MockBackend,
    api_key: Option<String>,
    script: Mutex<VecDeque<u16>>,
    requests: AtomicUsize,
    shutdown: AtomicBool,
}

/// Background stub server; shuts down on drop.
pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port. When `api_key` is set, requests
    /// without `authorization: Bearer <key>` get 401.
    pub fn start(fixture: MockBackend, api_key: Option<&str>) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            fixture,
            api_key: api_key.map(str::to_string),
            script: Mutex::new(VecDeque::new()),
            requests: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
        });
        let worker = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if worker.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let conn = Arc::clone(&worker);
                    std::thread::spawn(move || {
                        let _ = serve(&conn, stream);
                    });
                }
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    /// Statuses to answer with (in order) before serving normally.
    pub fn script(&self, statuses: impl IntoIterator<Item = u16>) {
        self.shared
            .script
            .lock()
            .expect("script lock")
            .extend(statuses);
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far.
    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let value = value.trim();
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.parse().unwrap_or(0),
                "authorization" => authorization = Some(value.to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    shared.requests.fetch_add(1, Ordering::SeqCst);

    let (status, payload) = respond(shared, &request_line, authorization.as_deref(), &body);
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    stream.flush()
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn respond(shared: &Shared, request_line: &str, authorization: Option<&str>, body: &[u8]) -> (u16, String) {
    let mut parts = request_line.split_whitespace();
    if (parts.next(), parts.next()) != (Some("POST"), Some("/v1/complete")) {
        return (404, error_body("not found"));
    }
    if let Some(key) = &shared.api_key {
        if authorization != Some(format!("Bearer {key}").as_str()) {
            return (401, error_body("unauthorized"));
        }
    }
    if let Some(status) = shared.script.lock().expect("script lock").pop_front() {
        return (status, error_body("scripted failure"));
    }
    let wire: WireRequest = match serde_json::from_slice(body) {
        Ok(w) => w,
        Err(e) => return (400, error_body(&e.to_string())),
    };
    let mut request = BackendRequest::new(wire.model, wire.prompt);
    request.decode = Decoding {
        temperature: wire.temperature,
        max_tokens: wire.max_tokens,
        seed: wire.seed,
    };
    match shared.fixture.complete(&request) {
        Ok(resp) => {
            let usage = Usage {
                prompt_tokens: request.prompt.split_whitespace().count() as u64,
                completion_tokens: resp.text.split_whitespace().count() as u64,
            };
            let body = WireResponse {
                text: resp.text,
                usage,
            };
            (200, serde_json::to_string(&body).expect("serializable"))
        }
        Err(BackendError::FixtureMiss { .. }) => (404, error_body("fixture_miss")),
        Err(e) => (400, error_body(&e.to_string())),
    }
}
