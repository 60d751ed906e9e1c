//! Sentence embeddings, cosine similarity and an exact nearest-neighbor index.

mod cache;
mod client;

pub use cache::{cache_key, EmbeddingCache};
pub use client::{EmbedOptions, Embedder, EmbeddingService, HttpEmbeddingService};

use serde::{Deserialize, Serialize};

use crate::corpus::Pool;
use crate::error::{Error, Result};

/// Which end of a similarity ranking to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Most,
    Least,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Most => "most",
            Polarity::Least => "least",
        }
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most" => Ok(Polarity::Most),
            "least" => Ok(Polarity::Least),
            other => Err(Error::Config(format!("unknown polarity {other:?}"))),
        }
    }
}

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `raw` to unit length.
    pub fn normalize(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("embedding has zero dimensions".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "embedding contains NaN or infinity".into(),
            ));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite(format!("embedding norm is {norm}")));
        }
        Ok(EmbeddingVector(raw.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit length, e.g. read back from cache.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        EmbeddingVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        EmbeddingVector::normalize(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two normalized vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub index: usize,
    pub score: f64,
}

/// Brute-force index over one vector per pool example.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    dim: usize,
}

impl EmbeddingIndex {
    pub fn build(pool: &Pool, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        Self::from_parts(pool.ids().map(str::to_string).collect(), vectors)
    }

    pub fn from_parts(ids: Vec<String>, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::OutOfRange(format!(
                "{} ids but {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, EmbeddingVector::dim);
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        Ok(EmbeddingIndex { ids, vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The `m` most (or least) similar items to `query`.
    ///
    /// `Most` is sorted by descending similarity and `Least` by ascending;
    /// equal scores keep ascending pool index in both cases.
    pub fn knn_query(
        &self,
        query: &EmbeddingVector,
        m: usize,
        polarity: Polarity,
    ) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::Empty("query against an empty index".into()));
        }
        if m == 0 || m > self.len() {
            return Err(Error::OutOfRange(format!(
                "m = {m} outside 1..={}",
                self.len()
            )));
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, dot(&v.0, &query.0).clamp(-1.0, 1.0)))
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            let by_score = match polarity {
                Polarity::Most => b.1.total_cmp(&a.1),
                Polarity::Least => a.1.total_cmp(&b.1),
            };
            by_score.then(a.0.cmp(&b.0))
        };
        if m < scored.len() {
            scored.select_nth_unstable_by(m - 1, order);
            scored.truncate(m);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(index, score)| Neighbor {
                id: self.ids[index].clone(),
                index,
                score,
            })
            .collect())
    }
}
