//! Acquisition strategies: choose `k` demonstrations from a pool.
//!
//! Random, diversity and uncertainty selection are test-independent and
//! produce one global demonstration list. Similarity selection is computed
//! per test example.

mod kmeans;

pub use kmeans::{kmeans, KMeansParams, KMeansState};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Pool;
use crate::embedder::{EmbeddingIndex, EmbeddingVector, Polarity};
use crate::error::{Error, Result};
use crate::seeded_rng;

pub const DEFAULT_K: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Diversity,
    Uncertainty,
    Similarity,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Random,
        Method::Diversity,
        Method::Uncertainty,
        Method::Similarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Diversity => "diversity",
            Method::Uncertainty => "uncertainty",
            Method::Similarity => "similarity",
        }
    }

    pub fn scope(self) -> Scope {
        match self {
            Method::Similarity => Scope::PerTest,
            _ => Scope::Global,
        }
    }

    pub fn supports_least(self) -> bool {
        matches!(self, Method::Uncertainty | Method::Similarity)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Where the most relevant similarity-selected demonstration goes in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityOrder {
    /// Closest to the test input, i.e. the final demonstration.
    #[default]
    NearestLast,
    NearestFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub method: Method,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub polarity: Polarity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order: SimilarityOrder,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl AcquisitionConfig {
    pub fn new(method: Method) -> Self {
        AcquisitionConfig {
            method,
            k: DEFAULT_K,
            polarity: Polarity::Most,
            seed: 0,
            order: SimilarityOrder::default(),
        }
    }

    pub fn k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn polarity(mut self, polarity: Polarity) -> Self {
        self.polarity = polarity;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `k = 0` is accepted and means the zero-shot baseline.
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.k > pool_size {
            return Err(Error::OutOfRange(format!(
                "k = {} exceeds pool size {pool_size}",
                self.k
            )));
        }
        if self.polarity == Polarity::Least && !self.method.supports_least() {
            return Err(Error::Config(format!(
                "polarity \"least\" is not defined for {}",
                self.method
            )));
        }
        Ok(())
    }

    /// Short stable label, e.g. `similarity-least-k16-s3`.
    pub fn cell_name(&self) -> String {
        format!(
            "{}-{}-k{}-s{}",
            self.method, self.polarity, self.k, self.seed
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    PerTest,
}

/// One chosen pool example with its diagnostic score, if the method has one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub id: String,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSelection {
    pub test_id: String,
    pub demos: Vec<Selected>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum Selections {
    Global { demos: Vec<Selected> },
    PerTest { tests: Vec<TestSelection> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub k: usize,
    pub polarity: Polarity,
    pub seed: u64,
    #[serde(flatten)]
    pub selections: Selections,
}

impl SelectionResult {
    pub fn global(cfg: &AcquisitionConfig, demos: Vec<Selected>) -> Self {
        SelectionResult {
            method: cfg.method,
            k: cfg.k,
            polarity: cfg.polarity,
            seed: cfg.seed,
            selections: Selections::Global { demos },
        }
    }

    pub fn per_test(cfg: &AcquisitionConfig, tests: Vec<TestSelection>) -> Self {
        SelectionResult {
            method: cfg.method,
            k: cfg.k,
            polarity: cfg.polarity,
            seed: cfg.seed,
            selections: Selections::PerTest { tests },
        }
    }

    /// The acquisition settings this selection was made with.
    pub fn config(&self) -> AcquisitionConfig {
        AcquisitionConfig::new(self.method)
            .k(self.k)
            .polarity(self.polarity)
            .seed(self.seed)
    }

    pub fn scope(&self) -> Scope {
        match self.selections {
            Selections::Global { .. } => Scope::Global,
            Selections::PerTest { .. } => Scope::PerTest,
        }
    }

    /// Demonstrations used for a given test example.
    pub fn demos_for(&self, test_id: &str) -> Option<&[Selected]> {
        match &self.selections {
            Selections::Global { demos } => Some(demos),
            Selections::PerTest { tests } => tests
                .iter()
                .find(|t| t.test_id == test_id)
                .map(|t| t.demos.as_slice()),
        }
    }

    /// Checks that every list holds exactly `k` distinct ids from `pool`.
    pub fn validate(&self, pool: &Pool) -> Result<()> {
        let check = |demos: &[Selected]| -> Result<()> {
            if demos.len() != self.k {
                return Err(Error::InvalidPool(format!(
                    "selection has {} ids, expected {}",
                    demos.len(),
                    self.k
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for d in demos {
                if pool.index_of(&d.id) != Some(d.index) {
                    return Err(Error::InvalidPool(format!(
                        "selected id {:?} is not pool example {}",
                        d.id, d.index
                    )));
                }
                if !seen.insert(&d.id) {
                    return Err(Error::InvalidPool(format!(
                        "selected id {:?} repeated",
                        d.id
                    )));
                }
            }
            Ok(())
        };
        match &self.selections {
            Selections::Global { demos } => check(demos),
            Selections::PerTest { tests } => tests.iter().try_for_each(|t| check(&t.demos)),
        }
    }
}

fn require(cfg: &AcquisitionConfig, method: Method, pool: &Pool) -> Result<()> {
    if cfg.method != method {
        return Err(Error::Config(format!(
            "config method is {}, expected {method}",
            cfg.method
        )));
    }
    cfg.validate(pool.len())
}

fn selected(pool: &Pool, index: usize, score: Option<f64>) -> Selected {
    Selected {
        id: pool.examples()[index].id.clone(),
        index,
        score,
    }
}

/// Uniform sample of `k` ids without replacement, in draw order.
///
/// Partial Fisher-Yates over pool indices: for `i` in `0..k` swap position
/// `i` with a uniformly drawn position in `i..n`.
pub fn select_random(pool: &Pool, cfg: &AcquisitionConfig) -> Result<SelectionResult> {
    require(cfg, Method::Random, pool)?;
    let n = pool.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(cfg.seed);
    for i in 0..cfg.k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let demos = idx[..cfg.k]
        .iter()
        .map(|&i| selected(pool, i, None))
        .collect();
    Ok(SelectionResult::global(cfg, demos))
}

/// One representative per k-means cluster: the member nearest the centroid.
///
/// Output is ordered by cluster id; scores are Euclidean distances to the
/// centroid.
pub fn select_diverse(
    pool: &Pool,
    index: &EmbeddingIndex,
    cfg: &AcquisitionConfig,
) -> Result<SelectionResult> {
    require(cfg, Method::Diversity, pool)?;
    if index.len() != pool.len() {
        return Err(Error::OutOfRange(format!(
            "index covers {} examples, pool has {}",
            index.len(),
            pool.len()
        )));
    }
    if cfg.k == 0 {
        return Ok(SelectionResult::global(cfg, vec![]));
    }
    let reps = cluster_representatives(index.vectors(), cfg.k, cfg.seed, KMeansParams::default())?;
    let demos = reps
        .into_iter()
        .map(|(i, d)| selected(pool, i, Some(d)))
        .collect();
    Ok(SelectionResult::global(cfg, demos))
}

/// `(point index, distance to centroid)` for each cluster, by cluster id.
pub fn cluster_representatives<V: AsRef<[f64]>>(
    points: &[V],
    k: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<Vec<(usize, f64)>> {
    let state = kmeans(points, k, seed, params)?;
    Ok((0..k)
        .map(|c| {
            let mu = &state.centroids[c];
            state
                .members(c)
                .map(|i| (i, kmeans::sq_dist(points[i].as_ref(), mu)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 <= cur.1 => Some(b),
                    _ => Some(cur),
                })
                .map(|(i, d)| (i, d.sqrt()))
                .expect("k-means leaves no cluster empty")
        })
        .collect())
}

/// The `k` highest-perplexity examples (or lowest, for `Polarity::Least`).
pub fn select_uncertain(
    pool: &Pool,
    perplexity: &HashMap<String, f64>,
    cfg: &AcquisitionConfig,
) -> Result<SelectionResult> {
    require(cfg, Method::Uncertainty, pool)?;
    let mut scored = Vec::with_capacity(pool.len());
    for (i, ex) in pool.examples().iter().enumerate() {
        let p = *perplexity
            .get(&ex.id)
            .ok_or_else(|| Error::MissingLabel(format!("no perplexity for {:?}", ex.id)))?;
        if !p.is_finite() || p <= 0.0 {
            return Err(Error::NonFinite(format!("perplexity {p} for {:?}", ex.id)));
        }
        scored.push((i, p));
    }
    scored.sort_by(|a, b| {
        let by = match cfg.polarity {
            Polarity::Most => b.1.total_cmp(&a.1),
            Polarity::Least => a.1.total_cmp(&b.1),
        };
        by.then(a.0.cmp(&b.0))
    });
    let demos = scored[..cfg.k]
        .iter()
        .map(|&(i, p)| selected(pool, i, Some(p)))
        .collect();
    Ok(SelectionResult::global(cfg, demos))
}

/// Nearest (or farthest) pool examples to one test vector, in prompt order.
pub fn select_similar(
    pool: &Pool,
    index: &EmbeddingIndex,
    test_vec: &EmbeddingVector,
    cfg: &AcquisitionConfig,
) -> Result<Vec<Selected>> {
    require(cfg, Method::Similarity, pool)?;
    if cfg.k == 0 {
        return Ok(vec![]);
    }
    let mut out: Vec<Selected> = index
        .knn_query(test_vec, cfg.k, cfg.polarity)?
        .into_iter()
        .map(|n| selected(pool, n.index, Some(n.score)))
        .collect();
    if cfg.order == SimilarityOrder::NearestLast {
        out.reverse();
    }
    Ok(out)
}
