//! Experiment configuration (TOML).
//!
//! ```toml
//! task = "task.toml"
//! pool = "pool.jsonl"
//! test = "test.jsonl"
//! output = "runs/sst2"
//! seeds = [0, 1, 2, 3, 4]
//! ablate_labels = false
//! concurrency = 4
//!
//! [embedding]
//! url = "http://localhost:8080/embed"
//! model = "all-MiniLM-L6-v2"
//!
//! [scoring]
//! url = "http://localhost:8081/score"
//! model = "gpt2"
//!
//! [[methods]]
//! method = "similarity"
//! k = 16
//! polarity = "most"
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use demopick_core::select::{AcquisitionConfig, Method};
use demopick_core::Polarity;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_EMBED_URL: &str = "DEMOPICK_EMBED_URL";
pub const ENV_SCORE_URL: &str = "DEMOPICK_SCORE_URL";
pub const ENV_CACHE_DIR: &str = "DEMOPICK_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub url: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: PathBuf,
    pub pool: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub embedding: Option<ServiceConfig>,
    #[serde(default)]
    pub scoring: Option<ServiceConfig>,
    pub methods: Vec<AcquisitionConfig>,
    #[serde(default)]
    pub ablate_labels: bool,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Mock behavior for both services; see `demopick_core::mock::MockMode::parse`.
    #[serde(default)]
    pub mock: Option<String>,
    #[serde(default)]
    pub dump_prompts: bool,
    /// Directory holding the embedding cache file.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_concurrency() -> usize {
    4
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub k: Option<usize>,
    pub polarity: Option<Polarity>,
    pub seed: Option<u64>,
    pub mock: Option<String>,
    pub dump_prompts: bool,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).context("parsing experiment config")?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Loads a config file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml_str(&text, base)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(url) = get(ENV_EMBED_URL) {
            match &mut self.embedding {
                Some(s) => s.url = url,
                None => {
                    self.embedding = Some(ServiceConfig {
                        url,
                        model: "default".into(),
                    })
                }
            }
        }
        if let Some(url) = get(ENV_SCORE_URL) {
            match &mut self.scoring {
                Some(s) => s.url = url,
                None => {
                    self.scoring = Some(ServiceConfig {
                        url,
                        model: "default".into(),
                    })
                }
            }
        }
        if let Some(dir) = get(ENV_CACHE_DIR) {
            self.cache_dir = Some(PathBuf::from(dir));
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(method) = o.method {
            let mut acq = AcquisitionConfig::new(method);
            if let Some(first) = self.methods.iter().find(|m| m.method == method) {
                acq = first.clone();
            }
            self.methods = vec![acq];
        }
        for m in &mut self.methods {
            if let Some(k) = o.k {
                m.k = k;
            }
            if let Some(p) = o.polarity {
                m.polarity = p;
            }
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if o.mock.is_some() {
            self.mock = o.mock.clone();
        }
        if o.dump_prompts {
            self.dump_prompts = true;
        }
        if let Some(out) = &o.out {
            self.output = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("config lists no methods");
        }
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        if self.mock.is_none() && self.scoring.is_none() {
            bail!("no scoring service configured (set [scoring], {ENV_SCORE_URL}, or --mock)");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn cache_file(&self) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| self.resolve(d).join("embeddings.jsonl"))
    }

    /// Every (method, seed) cell, methods outermost.
    pub fn cells(&self) -> Vec<AcquisitionConfig> {
        self.methods
            .iter()
            .flat_map(|m| self.seeds.iter().map(move |&s| m.clone().seed(s)))
            .collect()
    }

    /// Hash of the effective configuration, for the run manifest.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
task = "task.toml"
pool = "pool.jsonl"
test = "test.jsonl"
seeds = [1, 2]

[scoring]
url = "http://localhost:1/score"
model = "gpt2"

[[methods]]
method = "random"

[[methods]]
method = "similarity"
k = 4
polarity = "least"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASIC, Path::new("/data")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.methods[0].k, 16);
        assert_eq!(cfg.methods[0].polarity, Polarity::Most);
        assert_eq!(cfg.methods[1].polarity, Polarity::Least);
        assert_eq!(cfg.resolve(&cfg.pool), PathBuf::from("/data/pool.jsonl"));
        let cells = cfg.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].cell_name(), "random-most-k16-s2");
    }

    #[test]
    fn env_and_flag_overrides() {
        let mut cfg = ExperimentConfig::from_toml_str(BASIC, Path::new(".")).unwrap();
        cfg.apply_env(|k| match k {
            ENV_SCORE_URL => Some("http://elsewhere/score".into()),
            ENV_CACHE_DIR => Some("/tmp/c".into()),
            _ => None,
        });
        assert_eq!(cfg.scoring.as_ref().unwrap().url, "http://elsewhere/score");
        assert_eq!(
            cfg.cache_file().unwrap(),
            PathBuf::from("/tmp/c/embeddings.jsonl")
        );
        cfg.apply(&Overrides {
            method: Some(Method::Similarity),
            k: Some(2),
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!(cfg.methods.len(), 1);
        assert_eq!(cfg.methods[0].k, 2);
        assert_eq!(cfg.methods[0].polarity, Polarity::Least);
        assert_eq!(cfg.seeds, [9]);
    }

    #[test]
    fn rejects_empty_methods_and_missing_scorer() {
        let mut cfg = ExperimentConfig::from_toml_str(BASIC, Path::new(".")).unwrap();
        cfg.methods.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml_str(BASIC, Path::new(".")).unwrap();
        cfg.scoring = None;
        assert!(cfg.validate().is_err());
        cfg.mock = Some("uniform".into());
        assert!(cfg.validate().is_ok());
    }
}
