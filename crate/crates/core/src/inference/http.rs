use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model: String,
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<f64>,
}

/// JSON-over-HTTP scoring service client.
pub struct HttpScorer {
    url: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpScorer {
            url: url.into(),
            model: model.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Scorer for HttpScorer {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>> {
        let req = ScoreRequest {
            model: self.model.clone(),
            context: context.to_string(),
            continuation: continuation.to_string(),
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .map_err(|e| Error::Service(format!("{}: {e}", self.url)))?;
        let body: ScoreResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::BadResponse(format!("{}: {e}", self.url)))?;
        Ok(body.token_logprobs)
    }
}
