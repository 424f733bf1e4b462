//! HTTP client for the remote query encoder and an in-process stub server
//! speaking the same protocol.
//!
//! Endpoints: `POST /embed_query`, `POST /embed_candidate`, `GET /health`
//! and, when enabled, `GET /debug_states`. Bodies are JSON. Embeddings are
//! JSON number arrays, or base64 little-endian f32 when the message carries
//! `"encoding":"b64f32"`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregator::ConditioningVector;
use crate::encoder::{featurize_text, Provenance, QueryEmbedding, QueryEncoder, QueryInput};
use crate::error::{Error, Result};

pub const ENCODING_B64F32: &str = "b64f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub base_url: String,
    pub task: String,
    /// Expected embedding length; responses of any other length are rejected.
    pub out_dim: usize,
    pub attempts: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    /// Ask the service for base64 payloads.
    pub b64: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            task: "passage_ranking".into(),
            out_dim: 32,
            attempts: 3,
            backoff_base_ms: 100,
            timeout_ms: 30_000,
            b64: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model_id: String,
    pub hidden_size: usize,
}

/// Encode `f32` values as base64 of their little-endian bytes.
pub fn encode_b64f32(values: &[f64]) -> String {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    B64.encode(bytes)
}

pub fn decode_b64f32(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::RemoteMalformed(format!("bad base64 embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::RemoteMalformed(format!(
            "base64 embedding has {} bytes, not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn parse_embedding(body: &Value) -> Result<Vec<f64>> {
    let emb = body
        .get("embedding")
        .ok_or_else(|| Error::RemoteMalformed("response has no embedding".into()))?;
    let values = match (body.get("encoding").and_then(Value::as_str), emb) {
        (Some(ENCODING_B64F32), Value::String(s)) => decode_b64f32(s)?,
        (Some(other), _) if other != ENCODING_B64F32 => {
            return Err(Error::RemoteMalformed(format!(
                "unknown encoding {other:?}"
            )))
        }
        (_, Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::RemoteMalformed("embedding entry is not a number".into()))
            })
            .collect::<Result<_>>()?,
        _ => {
            return Err(Error::RemoteMalformed(
                "embedding has the wrong JSON type".into(),
            ))
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::RemoteMalformed(
            "embedding contains a non-finite value".into(),
        ));
    }
    Ok(values)
}

/// Blocking client with retry and exponential backoff.
#[derive(Debug, Clone)]
pub struct Client {
    pub cfg: ClientConfig,
    agent: ureq::Agent,
    next_id: Arc<AtomicUsize>,
}

fn is_timeout(err: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(err);
    while let Some(e) = cur {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(
                io.kind(),
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
            ) {
                return true;
            }
        }
        cur = e.source();
    }
    err.to_string().contains("timed out")
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        if cfg.attempts == 0 {
            return Err(Error::Config("remote attempts must be >= 1".into()));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build();
        Ok(Self {
            cfg,
            agent,
            next_id: Arc::new(AtomicUsize::new(0)),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn once(&self, path: &str, body: Option<&Value>) -> std::result::Result<Value, (bool, Error)> {
        let url = self.url(path);
        let resp = match body {
            Some(b) => self.agent.post(&url).send_json(b.clone()),
            None => self.agent.get(&url).call(),
        };
        match resp {
            Ok(r) => r.into_json::<Value>().map_err(|e| {
                (
                    false,
                    Error::RemoteMalformed(format!("{url}: invalid JSON body: {e}")),
                )
            }),
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                let err = Error::RemoteMalformed(format!("{url}: HTTP {code}: {text}"));
                Err((code >= 500, err))
            }
            Err(ureq::Error::Transport(t)) => {
                if is_timeout(&t) {
                    Err((true, Error::RemoteTimeout(format!("{url}: {t}"))))
                } else {
                    Err((true, Error::RemoteConnection(format!("{url}: {t}"))))
                }
            }
        }
    }

    fn request(&self, path: &str, body: Option<&Value>) -> Result<Value> {
        let mut last = None;
        for attempt in 0..self.cfg.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.cfg.backoff_base_ms << (attempt - 1),
                ));
            }
            match self.once(path, body) {
                Ok(v) => return Ok(v),
                Err((retry, e)) => {
                    log::warn!("remote {path} attempt {} failed: {e}", attempt + 1);
                    if !retry {
                        return Err(e);
                    }
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn health(&self) -> Result<Health> {
        let v = self.request("/health", None)?;
        serde_json::from_value(v)
            .map_err(|e| Error::RemoteMalformed(format!("bad health response: {e}")))
    }

    /// Query `/health` and require the reported hidden size to match.
    pub fn check_dims(&self) -> Result<Health> {
        let h = self.health()?;
        if h.hidden_size != self.cfg.out_dim {
            return Err(Error::RemoteDimMismatch {
                expected: self.cfg.out_dim,
                actual: h.hidden_size,
            });
        }
        Ok(h)
    }

    fn check_len(&self, values: Vec<f64>) -> Result<Vec<f64>> {
        if values.len() != self.cfg.out_dim {
            return Err(Error::RemoteDimMismatch {
                expected: self.cfg.out_dim,
                actual: values.len(),
            });
        }
        Ok(values)
    }

    pub fn embed_query(
        &self,
        query_text: &str,
        cond: &ConditioningVector,
    ) -> Result<QueryEmbedding> {
        let request_id = format!("q{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut body = json!({
            "task": self.cfg.task,
            "query_text": query_text,
            "conditioning": cond.values,
            "request_id": request_id,
        });
        if self.cfg.b64 {
            body["encoding"] = json!(ENCODING_B64F32);
        }
        let v = self.request("/embed_query", Some(&body))?;
        if let Some(id) = v.get("request_id").and_then(Value::as_str) {
            if id != request_id {
                return Err(Error::RemoteMalformed(format!(
                    "request_id mismatch: sent {request_id}, got {id}"
                )));
            }
        }
        let values = self.check_len(parse_embedding(&v)?)?;
        Ok(QueryEmbedding {
            values,
            provenance: Provenance::Remote,
            subset_tag: None,
        })
    }

    pub fn embed_candidate(&self, text: &str) -> Result<Vec<f64>> {
        let mut body = json!({ "text": text });
        if self.cfg.b64 {
            body["encoding"] = json!(ENCODING_B64F32);
        }
        let v = self.request("/embed_candidate", Some(&body))?;
        self.check_len(parse_embedding(&v)?)
    }
}

/// One-shot convenience wrapper around [`Client::embed_query`].
pub fn encode_query_remote(
    query_text: &str,
    cond: &ConditioningVector,
    cfg: &ClientConfig,
) -> Result<QueryEmbedding> {
    Client::new(cfg.clone())?.embed_query(query_text, cond)
}

/// [`QueryEncoder`] backed by the remote service. Queries must carry text.
#[derive(Debug, Clone)]
pub struct RemoteEncoder {
    pub client: Client,
}

impl RemoteEncoder {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        Ok(Self {
            client: Client::new(cfg)?,
        })
    }
}

impl QueryEncoder for RemoteEncoder {
    fn out_dim(&self) -> usize {
        self.client.cfg.out_dim
    }

    fn encode(&self, query: &QueryInput, cond: &ConditioningVector) -> Result<QueryEmbedding> {
        let text = query.text.as_deref().ok_or_else(|| {
            Error::Data(format!(
                "query {} has no text; remote mode needs text",
                query.id
            ))
        })?;
        self.client.embed_query(text, cond)
    }
}

/// How the stub computes query embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubMode {
    /// `featurize_text(query_text) + conditioning`.
    Featurize,
    /// Always return this vector.
    Fixed(Vec<f64>),
    /// Return a featurized vector of this (wrong) length.
    WrongDim(usize),
    /// Return a body that is not a valid embedding response.
    Garbage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubConfig {
    pub hidden_size: usize,
    pub model_id: String,
    pub mode: StubMode,
    pub debug: bool,
    /// Answer the first `fail_first` embedding requests with HTTP 503.
    pub fail_first: usize,
    /// Sleep this long before answering embedding requests.
    pub delay_ms: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            model_id: "stub-featurizer".into(),
            mode: StubMode::Featurize,
            debug: false,
            fail_first: 0,
            delay_ms: 0,
        }
    }
}

/// Background stub server; stops when dropped.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
    pub port: u16,
    pub requests: Arc<AtomicUsize>,
}

impl StubServer {
    /// Bind `addr` (use port 0 for an ephemeral port) and serve in a thread.
    pub fn start(cfg: StubConfig, addr: &str) -> Result<Self> {
        let server = Arc::new(
            tiny_http::Server::http(addr)
                .map_err(|e| Error::RemoteConnection(format!("cannot bind {addr}: {e}")))?,
        );
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| Error::RemoteConnection("stub bound a non-IP address".into()))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, cnt) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || serve_loop(&srv, &cfg, &cnt));
        Ok(Self {
            server,
            handle: Some(handle),
            port,
            requests,
        })
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    /// Block until the server thread exits (it only exits on drop).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_loop(server: &tiny_http::Server, cfg: &StubConfig, counter: &AtomicUsize) {
    for mut req in server.incoming_requests() {
        let mut body = String::new();
        let _ = req.as_reader().read_to_string(&mut body);
        let path = req.url().split('?').next().unwrap_or("").to_string();
        let (code, text) = handle(cfg, counter, req.method(), &path, &body);
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
            .expect("static header");
        let resp = tiny_http::Response::from_string(text)
            .with_status_code(code)
            .with_header(header);
        let _ = req.respond(resp);
    }
}

fn error_body(msg: &str) -> String {
    json!({ "error": msg }).to_string()
}

fn embedding_json(values: &[f64], b64: bool) -> (Value, Option<&'static str>) {
    if b64 {
        (json!(encode_b64f32(values)), Some(ENCODING_B64F32))
    } else {
        (json!(values), None)
    }
}

fn handle(
    cfg: &StubConfig,
    counter: &AtomicUsize,
    method: &tiny_http::Method,
    path: &str,
    body: &str,
) -> (u16, String) {
    use tiny_http::Method;
    match (method, path) {
        (Method::Get, "/health") => (
            200,
            json!({ "model_id": cfg.model_id, "hidden_size": cfg.hidden_size }).to_string(),
        ),
        (Method::Get, "/debug_states") if cfg.debug => (
            200,
            json!({ "model_id": cfg.model_id, "note": "stub has no hidden states", "states": [] })
                .to_string(),
        ),
        (Method::Post, "/embed_query") | (Method::Post, "/embed_candidate") => {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            if cfg.delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(cfg.delay_ms));
            }
            if n < cfg.fail_first {
                return (503, error_body("warming up"));
            }
            let req: Value = match serde_json::from_str(body) {
                Ok(v) => v,
                Err(e) => return (400, error_body(&format!("invalid JSON: {e}"))),
            };
            let b64 = req.get("encoding").and_then(Value::as_str) == Some(ENCODING_B64F32);
            if matches!(cfg.mode, StubMode::Garbage) {
                return (200, json!({ "embedding": "not-an-array" }).to_string());
            }
            if path == "/embed_candidate" {
                let Some(text) = req.get("text").and_then(Value::as_str) else {
                    return (400, error_body("missing text"));
                };
                if text.is_empty() {
                    return (400, error_body("text must be non-empty"));
                }
                let v = featurize_text(text, cfg.hidden_size).0;
                let (emb, enc) = embedding_json(&v, b64);
                let mut out = json!({ "embedding": emb, "token_count": text.split_whitespace().count(), "model_id": cfg.model_id });
                if let Some(e) = enc {
                    out["encoding"] = json!(e);
                }
                return (200, out.to_string());
            }
            let Some(text) = req.get("query_text").and_then(Value::as_str) else {
                return (400, error_body("missing query_text"));
            };
            let cond: Vec<f64> = match req
                .get("conditioning")
                .map(|c| serde_json::from_value(c.clone()))
            {
                Some(Ok(c)) => c,
                _ => return (400, error_body("conditioning must be an array of numbers")),
            };
            if cond.len() != cfg.hidden_size {
                return (
                    400,
                    error_body(&format!(
                        "conditioning length {} != hidden size {}",
                        cond.len(),
                        cfg.hidden_size
                    )),
                );
            }
            let values = match &cfg.mode {
                StubMode::Featurize => featurize_text(text, cfg.hidden_size)
                    .0
                    .iter()
                    .zip(&cond)
                    .map(|(a, b)| a + b)
                    .collect(),
                StubMode::Fixed(v) => v.clone(),
                StubMode::WrongDim(n) => featurize_text(text, *n).0,
                StubMode::Garbage => unreachable!(),
            };
            let (emb, enc) = embedding_json(&values, b64);
            let mut out = json!({
                "request_id": req.get("request_id").cloned().unwrap_or(Value::Null),
                "embedding": emb,
                "token_count": text.split_whitespace().count(),
                "model_id": cfg.model_id,
            });
            if let Some(e) = enc {
                out["encoding"] = json!(e);
            }
            (200, out.to_string())
        }
        _ => (404, error_body("not found")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b64_round_trip() {
        let v = vec![1.0, -2.5, 0.125, 3.0e-3];
        let back = decode_b64f32(&encode_b64f32(&v)).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(decode_b64f32("AAA=").is_err());
    }

    #[test]
    fn parse_rejects_bad_payloads() {
        assert!(parse_embedding(&json!({})).is_err());
        assert!(parse_embedding(&json!({"embedding": [1.0, "x"]})).is_err());
        assert!(parse_embedding(&json!({"embedding": "AAAAAA==", "encoding": "hex"})).is_err());
        assert_eq!(
            parse_embedding(&json!({"embedding": [1.0, 2.0]})).unwrap(),
            vec![1.0, 2.0]
        );
    }
}
