//! Demonstration selection for in-context learning, framed as a single round
//! of pool-based active learning.
//!
//! The pipeline is: load a [`corpus::Pool`], embed it ([`embedder`]), pick `k`
//! demonstrations with one of the acquisition strategies in [`select`],
//! render prompts ([`prompt`]), score candidate answers against a language
//! model ([`inference`]) and summarize with [`eval`].

pub mod corpus;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod mock;
pub mod prompt;
pub mod select;

pub use corpus::{Example, Label, Pool, TaskKind, TaskSpec};
pub use embedder::{EmbeddingIndex, EmbeddingVector, Polarity};
pub use error::{Error, Result};
pub use eval::EvaluationReport;
pub use inference::{PredictionRecord, ScoredOption, Scorer};
pub use prompt::PromptInstance;
pub use select::{AcquisitionConfig, Method, SelectionResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one generator used by every seeded operation in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
