//! Newline-delimited JSON client for external backends.
//!
//! Requests and responses are single-line JSON objects matched by a string
//! `id`. Responses may arrive in any order; requests are retried with the
//! same id on timeout, so backends can treat them as idempotent.
//!
//! Endpoints:
//! - `cmd://<program> [args...]` — spawn a child process and speak over its
//!   standard streams (whitespace-separated argv).
//! - `tcp://host:port` — connect over TCP.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid endpoint `{0}`")]
    InvalidEndpoint(String),
}

/// Parsed backend address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Cmd(Vec<String>),
    Tcp(String),
}

impl Endpoint {
    pub fn parse(uri: &str) -> Result<Self, WireError> {
        if let Some(rest) = uri.strip_prefix("cmd://") {
            let argv: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(WireError::InvalidEndpoint(uri.to_string()));
            }
            Ok(Endpoint::Cmd(argv))
        } else if let Some(rest) = uri.strip_prefix("tcp://") {
            if rest.is_empty() {
                return Err(WireError::InvalidEndpoint(uri.to_string()));
            }
            Ok(Endpoint::Tcp(rest.to_string()))
        } else {
            Err(WireError::InvalidEndpoint(uri.to_string()))
        }
    }
}

struct PendingState {
    ready: HashMap<String, Value>,
    failed: Option<WireError>,
}

struct Inner {
    writer: Mutex<Box<dyn Write + Send>>,
    state: Mutex<PendingState>,
    cv: Condvar,
    timeout: Duration,
    retries: u32,
    next_id: AtomicU64,
    child: Mutex<Option<Child>>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            if let Some(child) = guard.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

/// Thread-safe client; concurrent calls are matched to responses by id.
#[derive(Clone)]
pub struct NdjsonClient {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for NdjsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("NdjsonClient")
    }
}

impl NdjsonClient {
    pub fn connect(endpoint: &Endpoint) -> Result<Self, WireError> {
        Self::connect_with(endpoint, Duration::from_secs(30), 1)
    }

    pub fn connect_with(
        endpoint: &Endpoint,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, WireError> {
        let (writer, reader, child): (Box<dyn Write + Send>, Box<dyn Read + Send>, Option<Child>) =
            match endpoint {
                Endpoint::Cmd(argv) => {
                    let mut child = Command::new(&argv[0])
                        .args(&argv[1..])
                        .stdin(Stdio::piped())
                        .stdout(Stdio::piped())
                        .spawn()
                        .map_err(|e| {
                            WireError::BackendUnavailable(format!("spawn {}: {e}", argv[0]))
                        })?;
                    let stdin = child.stdin.take().expect("piped stdin");
                    let stdout = child.stdout.take().expect("piped stdout");
                    (Box::new(stdin), Box::new(stdout), Some(child))
                }
                Endpoint::Tcp(addr) => {
                    let stream = std::net::TcpStream::connect(addr).map_err(|e| {
                        WireError::BackendUnavailable(format!("connect {addr}: {e}"))
                    })?;
                    let read_half = stream
                        .try_clone()
                        .map_err(|e| WireError::BackendUnavailable(e.to_string()))?;
                    (Box::new(stream), Box::new(read_half), None)
                }
            };
        let inner = Arc::new(Inner {
            writer: Mutex::new(writer),
            state: Mutex::new(PendingState { ready: HashMap::new(), failed: None }),
            cv: Condvar::new(),
            timeout,
            retries,
            next_id: AtomicU64::new(1),
            child: Mutex::new(child),
        });
        spawn_reader(Arc::clone(&inner), reader);
        Ok(NdjsonClient { inner })
    }

    /// Sends `fields` with a fresh `id` and blocks until the matching
    /// response arrives, retrying with the same id on timeout.
    pub fn call(&self, fields: serde_json::Map<String, Value>) -> Result<Value, WireError> {
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let mut payload = fields;
        payload.insert("id".to_string(), Value::String(id.clone()));
        let mut line = serde_json::to_string(&Value::Object(payload))
            .map_err(|e| WireError::Protocol(e.to_string()))?;
        line.push('\n');

        for _attempt in 0..=self.inner.retries {
            {
                let mut writer = self
                    .inner
                    .writer
                    .lock()
                    .map_err(|_| WireError::BackendUnavailable("writer poisoned".into()))?;
                writer
                    .write_all(line.as_bytes())
                    .and_then(|_| writer.flush())
                    .map_err(|e| WireError::BackendUnavailable(format!("write: {e}")))?;
            }
            let deadline = Instant::now() + self.inner.timeout;
            let mut state = self
                .inner
                .state
                .lock()
                .map_err(|_| WireError::BackendUnavailable("state poisoned".into()))?;
            loop {
                if let Some(value) = state.ready.remove(&id) {
                    return Ok(value);
                }
                if let Some(err) = &state.failed {
                    return Err(err.clone());
                }
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                let (next, timed_out) = self
                    .inner
                    .cv
                    .wait_timeout(state, deadline - now)
                    .map_err(|_| WireError::BackendUnavailable("state poisoned".into()))?;
                state = next;
                if timed_out.timed_out() {
                    if let Some(value) = state.ready.remove(&id) {
                        return Ok(value);
                    }
                    if let Some(err) = &state.failed {
                        return Err(err.clone());
                    }
                    break;
                }
            }
        }
        Err(WireError::BackendUnavailable(format!(
            "no response for request {id} after {} attempt(s)",
            self.inner.retries + 1
        )))
    }
}

fn spawn_reader(inner: Arc<Inner>, reader: Box<dyn Read + Send>) {
    std::thread::spawn(move || {
        let mut lines = BufReader::new(reader);
        let mut buf = String::new();
        loop {
            buf.clear();
            let outcome = match lines.read_line(&mut buf) {
                Ok(0) => Some(WireError::BackendUnavailable("stream closed".into())),
                Ok(_) => {
                    let line = buf.trim_end_matches(['\n', '\r']);
                    if line.is_empty() {
                        None
                    } else {
                        match serde_json::from_str::<Value>(line) {
                            Ok(value) => match value.get("id").and_then(Value::as_str) {
                                Some(id) => {
                                    let id = id.to_string();
                                    if let Ok(mut state) = inner.state.lock() {
                                        state.ready.insert(id, value);
                                        inner.cv.notify_all();
                                    }
                                    None
                                }
                                None => Some(WireError::Protocol(format!(
                                    "response lacks a string id: {line}"
                                ))),
                            },
                            Err(e) => Some(WireError::Protocol(format!("bad response line: {e}"))),
                        }
                    }
                }
                Err(e) => Some(WireError::BackendUnavailable(format!("read: {e}"))),
            };
            if let Some(err) = outcome {
                if let Ok(mut state) = inner.state.lock() {
                    state.failed = Some(err);
                    inner.cv.notify_all();
                }
                return;
            }
        }
    });
}
