//! Language-model scoring: continuation log-probabilities, perplexity and
//! option-likelihood prediction.

mod http;

pub use http::{HttpScorer, ScoreRequest, ScoreResponse};

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Label, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::prompt::PromptInstance;

/// A scoring backend: natural-log probabilities of each continuation token.
pub trait Scorer: Send + Sync {
    fn model_id(&self) -> &str;

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>>;
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>> {
        (**self).token_logprobs(context, continuation)
    }
}

/// Total log-probability of `continuation` given `context`, and its token count.
pub fn continuation_logprob<S: Scorer + ?Sized>(
    scorer: &S,
    context: &str,
    continuation: &str,
) -> Result<(f64, usize)> {
    if continuation.is_empty() {
        return Err(Error::Empty("continuation must be nonempty".into()));
    }
    let lps = scorer.token_logprobs(context, continuation)?;
    if lps.is_empty() {
        return Err(Error::BadResponse(format!(
            "tokenization produced no tokens for {continuation:?}"
        )));
    }
    if let Some(x) = lps.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("token logprob {x}")));
    }
    if let Some(x) = lps.iter().find(|x| **x > 0.0) {
        return Err(Error::BadResponse(format!("positive token logprob {x}")));
    }
    Ok((lps.iter().sum(), lps.len()))
}

/// `exp(-mean token logprob)` of `text` scored with an empty context.
pub fn perplexity<S: Scorer + ?Sized>(scorer: &S, text: &str) -> Result<f64> {
    let (sum, n) = continuation_logprob(scorer, "", text)?;
    Ok((-sum / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOption {
    pub surface: String,
    pub sum_logprob: f64,
    pub token_count: usize,
    pub mean_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub test_id: String,
    pub predicted: Label,
    pub gold: Option<Label>,
    pub options: Vec<ScoredOption>,
    pub method: String,
    pub model_id: String,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> Option<bool> {
        self.gold.as_ref().map(|g| *g == self.predicted)
    }
}

/// One scoreable answer: the label it stands for and its surface text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub label: Label,
    pub surface: String,
}

/// Candidates for a test example: verbalizer surfaces in label-set order for
/// classification, the example's own options for multichoice.
pub fn candidates_for(task: &TaskSpec, test: &Example) -> Result<Vec<Candidate>> {
    match task.kind {
        TaskKind::Classification => Ok(task
            .label_set
            .iter()
            .map(|l| Candidate {
                label: Label::Class(l.clone()),
                surface: task.verbalizer[l].clone(),
            })
            .collect()),
        TaskKind::Multichoice => {
            let options = test
                .options
                .as_ref()
                .filter(|o| !o.is_empty())
                .ok_or_else(|| {
                    Error::InvalidPool(format!("multichoice example {:?} has no options", test.id))
                })?;
            Ok(options
                .iter()
                .enumerate()
                .map(|(i, o)| Candidate {
                    label: Label::Option(i),
                    surface: o.clone(),
                })
                .collect())
        }
    }
}

/// Scores every candidate as `" " + surface` after the prompt and picks the
/// highest mean token log-probability; the first candidate wins ties.
pub fn predict<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &PromptInstance,
    candidates: &[Candidate],
    gold: Option<Label>,
    method: &str,
) -> Result<PredictionRecord> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidates to score".into()));
    }
    let mut options = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.surface.is_empty() {
            return Err(Error::Empty("candidate surface is empty".into()));
        }
        let (sum, n) = continuation_logprob(scorer, &prompt.full_text, &format!(" {}", c.surface))?;
        options.push(ScoredOption {
            surface: c.surface.clone(),
            sum_logprob: sum,
            token_count: n,
            mean_logprob: sum / n as f64,
        });
    }
    let mut best = 0;
    for (i, o) in options.iter().enumerate().skip(1) {
        if o.mean_logprob > options[best].mean_logprob {
            best = i;
        }
    }
    Ok(PredictionRecord {
        test_id: prompt.test_id.clone(),
        predicted: candidates[best].label.clone(),
        gold,
        options,
        method: method.to_string(),
        model_id: scorer.model_id().to_string(),
    })
}
