//! Deterministic stand-ins for the embedding and scoring services.
//!
//! [`MockScorer`] and [`HashingEmbedder`] implement the service traits
//! in-process. [`MockServer`] exposes both over HTTP with the same JSON
//! contract the real clients speak, so the network path can be tested without
//! a model.
//!
//! Mock tokenization is whitespace splitting.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::EmbeddingService;
use crate::error::{Error, Result};
use crate::inference::{ScoreRequest, ScoreResponse, Scorer};

/// Log-probability given to the copied label's tokens.
const COPY_LOGPROB: f64 = -0.01;
const FALLBACK_VOCAB: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MockMode {
    /// Every token has probability `1 / vocab_size`.
    Uniform { vocab_size: f64 },
    /// Every token has the same log-probability.
    PerToken { logprob: f64 },
    /// Perplexity of a text equals its character count.
    Length,
    /// Favors the candidate equal to the label of the final demonstration in
    /// the context; uniform over a vocabulary of 8 otherwise.
    CopyLast {
        separator: String,
        label_prefix: String,
    },
}

impl MockMode {
    /// Parses `uniform`, `uniform:<vocab>`, `per-token:<logprob>`, `length` or
    /// `copy-last`. Copy-last needs the task's separator and label prefix,
    /// which are supplied by the caller.
    pub fn parse(spec: &str, separator: &str, label_prefix: &str) -> Result<Self> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let num = |a: Option<&str>, default: f64| -> Result<f64> {
            a.map_or(Ok(default), |s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad mock argument {s:?}")))
            })
        };
        match name {
            "uniform" => {
                let vocab_size = num(arg, FALLBACK_VOCAB)?;
                if vocab_size.is_nan() || vocab_size < 1.0 {
                    return Err(Error::Config("uniform vocab size must be >= 1".into()));
                }
                Ok(MockMode::Uniform { vocab_size })
            }
            "per-token" => {
                let logprob = num(arg, -1.0)?;
                if logprob.is_nan() || logprob > 0.0 {
                    return Err(Error::Config("per-token logprob must be <= 0".into()));
                }
                Ok(MockMode::PerToken { logprob })
            }
            "length" => Ok(MockMode::Length),
            "copy-last" => Ok(MockMode::CopyLast {
                separator: separator.to_string(),
                label_prefix: label_prefix.to_string(),
            }),
            other => Err(Error::Config(format!("unknown mock behavior {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MockMode::Uniform { .. } => "uniform",
            MockMode::PerToken { .. } => "per-token",
            MockMode::Length => "length",
            MockMode::CopyLast { .. } => "copy-last",
        }
    }
}

fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Label surface of the final demonstration in a prompt, if there is one.
pub fn last_demo_label<'a>(
    context: &'a str,
    separator: &str,
    label_prefix: &str,
) -> Option<&'a str> {
    let segments: Vec<&str> = context.split(separator).collect();
    if segments.len() < 2 {
        return None;
    }
    let demo = segments[segments.len() - 2];
    let tail = if label_prefix.is_empty() {
        demo.split_whitespace().last()?
    } else {
        demo.rsplit_once(label_prefix)?.1
    };
    Some(tail.trim())
}

#[derive(Debug, Clone)]
pub struct MockScorer {
    mode: MockMode,
    model_id: String,
}

impl MockScorer {
    pub fn new(mode: MockMode) -> Self {
        let model_id = format!("mock:{}", mode.name());
        MockScorer { mode, model_id }
    }

    pub fn mode(&self) -> &MockMode {
        &self.mode
    }
}

impl Scorer for MockScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>> {
        let toks = tokens(continuation);
        if toks.is_empty() {
            return Err(Error::Service(format!(
                "mock tokenizer found no tokens in {continuation:?}"
            )));
        }
        let per_token = match &self.mode {
            MockMode::Uniform { vocab_size } => -vocab_size.ln(),
            MockMode::PerToken { logprob } => *logprob,
            MockMode::Length => -(continuation.chars().count() as f64).ln(),
            MockMode::CopyLast {
                separator,
                label_prefix,
            } => match last_demo_label(context, separator, label_prefix) {
                Some(label) if label == continuation.trim() => COPY_LOGPROB,
                _ => -FALLBACK_VOCAB.ln(),
            },
        };
        Ok(vec![per_token; toks.len()])
    }
}

/// Feature-hashed bag of words, so texts sharing words land close together.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    model_id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "hashing embedder needs at least two dimensions");
        HashingEmbedder {
            dim,
            model_id: format!("mock:hashing-{dim}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        // Constant component keeps empty texts representable.
        v[0] = 1e-3;
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let h = Sha256::digest(word.to_lowercase().as_bytes());
            let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl EmbeddingService for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// HTTP server speaking the embedding (`POST /embed`) and scoring
/// (`POST /score`) wire contracts.
///
/// A scoring request whose `model` is `mock:<behavior>` uses that behavior;
/// anything else uses the server's default mode.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(bind: &str, default_mode: MockMode, embedder: HashingEmbedder) -> Result<Self> {
        let server = tiny_http::Server::http(bind)
            .map_err(|e| Error::Service(format!("cannot bind {bind}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Service("mock server has no IP address".into()))?;
        let server = Arc::new(server);
        let worker = server.clone();
        let handle = std::thread::spawn(move || {
            for req in worker.incoming_requests() {
                handle_request(req, &default_mode, &embedder);
            }
        });
        Ok(MockServer {
            addr,
            server,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn embed_url(&self) -> String {
        format!("http://{}/embed", self.addr)
    }

    pub fn score_url(&self) -> String {
        format!("http://{}/score", self.addr)
    }

    /// Blocks until the server is shut down from elsewhere.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Deserialize)]
struct EmbedBody {
    #[allow(dead_code)]
    model: String,
    texts: Vec<String>,
}

#[derive(Serialize)]
struct VectorsBody {
    vectors: Vec<Vec<f64>>,
}

fn handle_request(
    mut req: tiny_http::Request,
    default_mode: &MockMode,
    embedder: &HashingEmbedder,
) {
    let mut body = String::new();
    let outcome: std::result::Result<String, (u16, String)> =
        match req.as_reader().read_to_string(&mut body) {
            Err(e) => Err((400, e.to_string())),
            Ok(_) => match (req.method(), req.url()) {
                (tiny_http::Method::Post, "/embed") => serde_json::from_str::<EmbedBody>(&body)
                    .map_err(|e| (400, e.to_string()))
                    .map(|b| {
                        let vectors = b.texts.iter().map(|t| embedder.embed_one(t)).collect();
                        serde_json::to_string(&VectorsBody { vectors }).unwrap()
                    }),
                (tiny_http::Method::Post, "/score") => serde_json::from_str::<ScoreRequest>(&body)
                    .map_err(|e| (400, e.to_string()))
                    .and_then(|r| {
                        let mode = match r.model.strip_prefix("mock:") {
                            Some(spec) => match default_mode {
                                MockMode::CopyLast {
                                    separator,
                                    label_prefix,
                                } => MockMode::parse(spec, separator, label_prefix),
                                _ => MockMode::parse(spec, "\n\n", ""),
                            }
                            .unwrap_or_else(|_| default_mode.clone()),
                            None => default_mode.clone(),
                        };
                        MockScorer::new(mode)
                            .token_logprobs(&r.context, &r.continuation)
                            .map_err(|e| (422, e.to_string()))
                    })
                    .map(|token_logprobs| {
                        serde_json::to_string(&ScoreResponse { token_logprobs }).unwrap()
                    }),
                _ => Err((404, "not found".into())),
            },
        };
    let (status, text) = match outcome {
        Ok(t) => (200, t),
        Err((code, msg)) => (code, serde_json::json!({ "error": msg }).to_string()),
    };
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header is valid");
    let resp = tiny_http::Response::from_string(text)
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = req.respond(resp) {
        log::warn!("mock server failed to respond: {e}");
    }
}
