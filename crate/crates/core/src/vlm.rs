//! Transport layer for external vision-language services.
//!
//! The engine never runs model inference in-process. Proposer, scorer, and
//! alignment-verifier calls all go through [`VlmTransport`]: JSON in, JSON
//! out, one logical endpoint per call. Three implementations cover the
//! deployment spectrum:
//!
//! * [`HttpVlmTransport`] posts to a live service with retry and exponential
//!   backoff,
//! * [`RecordingTransport`] tees every request/response pair into a JSONL
//!   transcript,
//! * [`ReplayTransport`] serves responses back out of such a transcript,
//!   byte-deterministic and with zero network access.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_BASE: Duration = Duration::from_millis(200);

/// Runs `op` up to [`MAX_ATTEMPTS`] times, sleeping `200ms * 2^k` between
/// failures.
pub(crate) fn retry_with_backoff<T>(
    mut op: impl FnMut() -> std::result::Result<T, String>,
) -> Result<T> {
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        if attempt > 0 {
            std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
        }
        match op() {
            Ok(v) => return Ok(v),
            Err(message) => last = message,
        }
    }
    Err(Error::Transport {
        attempts: MAX_ATTEMPTS,
        message: last,
    })
}

/// A JSON-over-HTTP call surface for VLM services.
pub trait VlmTransport: Send {
    /// Posts `request` to `endpoint` (e.g. `/propose`) and returns the
    /// response body.
    fn call(&mut self, endpoint: &str, request: &Value) -> Result<Value>;
}

/// One request/response pair in a transcript file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub endpoint: String,
    pub request: Value,
    pub response: Value,
}

fn transcript_key(endpoint: &str, request: &Value) -> String {
    // serde_json maps are sorted, so this serialization is canonical.
    format!("{endpoint} {request}")
}

/// Live HTTP transport with retry.
pub struct HttpVlmTransport {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpVlmTransport {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpVlmTransport {
            base_url: base_url.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl VlmTransport for HttpVlmTransport {
    fn call(&mut self, endpoint: &str, request: &Value) -> Result<Value> {
        let url = format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            endpoint.trim_start_matches('/')
        );
        retry_with_backoff(|| {
            let resp = self
                .client
                .post(&url)
                .json(request)
                .send()
                .map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("status {}", resp.status()));
            }
            resp.json::<Value>().map_err(|e| e.to_string())
        })
    }
}

/// Wraps another transport and appends every exchange to a JSONL transcript.
pub struct RecordingTransport<T: VlmTransport> {
    inner: T,
    path: PathBuf,
}

impl<T: VlmTransport> RecordingTransport<T> {
    pub fn new(inner: T, path: impl Into<PathBuf>) -> Self {
        RecordingTransport {
            inner,
            path: path.into(),
        }
    }
}

impl<T: VlmTransport> VlmTransport for RecordingTransport<T> {
    fn call(&mut self, endpoint: &str, request: &Value) -> Result<Value> {
        let response = self.inner.call(endpoint, request)?;
        let entry = TranscriptEntry {
            endpoint: endpoint.to_string(),
            request: request.clone(),
            response: response.clone(),
        };
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        serde_json::to_writer(&mut file, &entry).map_err(|e| Error::MalformedResponse {
            message: format!("cannot record transcript entry: {e}"),
        })?;
        file.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        Ok(response)
    }
}

/// Replays a recorded transcript. Requests are matched exactly (endpoint
/// plus canonical request JSON); repeated identical requests consume
/// recorded responses in order.
pub struct ReplayTransport {
    responses: BTreeMap<String, VecDeque<Value>>,
}

impl ReplayTransport {
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut responses: BTreeMap<String, VecDeque<Value>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                    line: i + 1,
                    message: format!("transcript: {e}"),
                })?;
            responses
                .entry(transcript_key(&entry.endpoint, &entry.request))
                .or_default()
                .push_back(entry.response);
        }
        Ok(ReplayTransport { responses })
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        let mut responses: BTreeMap<String, VecDeque<Value>> = BTreeMap::new();
        for entry in entries {
            responses
                .entry(transcript_key(&entry.endpoint, &entry.request))
                .or_default()
                .push_back(entry.response);
        }
        ReplayTransport { responses }
    }
}

impl VlmTransport for ReplayTransport {
    fn call(&mut self, endpoint: &str, request: &Value) -> Result<Value> {
        let key = transcript_key(endpoint, request);
        self.responses
            .get_mut(&key)
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::Transport {
                attempts: 1,
                message: format!("no transcript entry for {key}"),
            })
    }
}

/// Pulls a required string field out of a service response.
pub(crate) fn response_str<'a>(value: &'a Value, field: &str) -> Result<&'a str> {
    value
        .get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedResponse {
            message: format!("missing string field {field:?} in {value}"),
        })
}
