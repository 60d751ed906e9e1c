use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{EmbeddingCache, EmbeddingVector};
use crate::error::{Error, Result};

/// Anything that turns texts into raw vectors, one per text, in order.
pub trait EmbeddingService: Send + Sync {
    fn model_id(&self) -> &str;

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

/// JSON-over-HTTP embedding service client.
pub struct HttpEmbeddingService {
    url: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpEmbeddingService {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpEmbeddingService {
            url: url.into(),
            model: model.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl EmbeddingService for HttpEmbeddingService {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let req = EmbedRequest {
            model: self.model.clone(),
            texts: texts.to_vec(),
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .map_err(|e| Error::Service(format!("{}: {e}", self.url)))?;
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::BadResponse(format!("{}: {e}", self.url)))?;
        Ok(body.vectors)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    /// Texts per service request.
    pub batch_size: usize,
    /// Maximum requests in flight.
    pub concurrency: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            batch_size: 64,
            concurrency: 4,
        }
    }
}

/// Embedding service plus cache.
pub struct Embedder {
    service: Box<dyn EmbeddingService>,
    cache: EmbeddingCache,
    options: EmbedOptions,
    requests: AtomicUsize,
}

impl Embedder {
    pub fn new(service: Box<dyn EmbeddingService>, cache: EmbeddingCache) -> Self {
        Embedder {
            service,
            cache,
            options: EmbedOptions::default(),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn with_options(mut self, options: EmbedOptions) -> Self {
        self.options = options;
        self
    }

    pub fn model_id(&self) -> &str {
        self.service.model_id()
    }

    /// Number of service requests issued so far.
    pub fn requests_issued(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// Embeds `texts`, normalizing every vector and serving repeats from cache.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let model = self.service.model_id();
        let mut missing: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for t in texts {
            if self.cache.get(model, t).is_none() && seen.insert(t.as_str()) {
                missing.push(t.clone());
            }
        }

        if !missing.is_empty() {
            let fresh = self.fetch(&missing)?;
            for (text, vector) in missing.iter().zip(&fresh) {
                self.cache.insert(model, text, vector)?;
            }
            let dim = fresh[0].dim();
            if let Some(v) = texts
                .iter()
                .filter_map(|t| self.cache.get(model, t))
                .find(|v| v.dim() != dim)
            {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
        }

        texts
            .iter()
            .map(|t| {
                self.cache
                    .get(model, t)
                    .ok_or_else(|| Error::Service(format!("no vector for text {t:?}")))
            })
            .collect()
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let chunks: Vec<&[String]> = texts.chunks(self.options.batch_size.max(1)).collect();
        let slots: Vec<Mutex<Option<Result<Vec<EmbeddingVector>>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.options.concurrency.clamp(1, chunks.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= chunks.len() {
                        break;
                    }
                    let out = self.fetch_chunk(chunks[i]);
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for slot in slots {
            out.extend(
                slot.into_inner()
                    .unwrap()
                    .expect("every chunk was processed")?,
            );
        }
        Ok(out)
    }

    fn fetch_chunk(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let raw = self.service.embed_raw(texts)?;
        if raw.len() != texts.len() {
            return Err(Error::BadResponse(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                raw.len()
            )));
        }
        let dim = raw.first().map_or(0, Vec::len);
        raw.into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::normalize(v)
            })
            .collect()
    }
}

/// Table-driven service for tests: fixed vectors by text.
#[cfg(test)]
pub(crate) struct TableService(pub std::collections::HashMap<String, Vec<f64>>, pub String);

#[cfg(test)]
impl EmbeddingService for TableService {
    fn model_id(&self) -> &str {
        &self.1
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.0
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Service(format!("unknown text {t:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> TableService {
        TableService(
            [
                ("a".to_string(), vec![3.0, 4.0]),
                ("b".to_string(), vec![1.0, 0.0]),
                ("bad".to_string(), vec![f64::INFINITY, 0.0]),
                ("wide".to_string(), vec![1.0, 0.0, 0.0]),
            ]
            .into(),
            "table".into(),
        )
    }

    #[test]
    fn empty_request_issues_nothing() {
        let e = Embedder::new(Box::new(table()), EmbeddingCache::in_memory());
        assert!(e.embed_batch(&[]).unwrap().is_empty());
        assert_eq!(e.requests_issued(), 0);
    }

    #[test]
    fn normalizes_and_caches() {
        let e = Embedder::new(Box::new(table()), EmbeddingCache::in_memory());
        let first = e.embed_batch(&["a".to_string()]).unwrap();
        assert!((first[0].values()[0] - 0.6).abs() < 1e-15);
        assert!((first[0].values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(e.requests_issued(), 1);
        let second = e.embed_batch(&["a".to_string()]).unwrap();
        assert_eq!(e.requests_issued(), 1);
        assert_eq!(
            first[0].values()[0].to_bits(),
            second[0].values()[0].to_bits()
        );
    }

    #[test]
    fn order_preserved_across_batches() {
        let e = Embedder::new(Box::new(table()), EmbeddingCache::in_memory()).with_options(
            EmbedOptions {
                batch_size: 1,
                concurrency: 3,
            },
        );
        let out = e
            .embed_batch(&["b".to_string(), "a".to_string(), "b".to_string()])
            .unwrap();
        assert_eq!(out[0].values(), &[1.0, 0.0]);
        assert!((out[1].values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(out[2], out[0]);
        assert_eq!(e.requests_issued(), 2);
    }

    #[test]
    fn rejects_bad_responses() {
        let e = Embedder::new(Box::new(table()), EmbeddingCache::in_memory());
        assert!(e.embed_batch(&["bad".to_string()]).is_err());
        assert!(e
            .embed_batch(&["b".to_string(), "wide".to_string()])
            .is_err());
        assert!(e.embed_batch(&["unknown".to_string()]).is_err());
    }
}
