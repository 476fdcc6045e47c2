use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, TokenDistribution};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteEndpointConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub top_k: usize,
}

impl RemoteEndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteEndpointConfig {
            base_url: base_url.into(),
            timeout_ms: 10_000,
            top_k: 200,
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    context: &'a [&'a str],
    top_k: usize,
}

#[derive(Deserialize)]
struct Response {
    tokens: Vec<ScoredToken>,
}

#[derive(Deserialize)]
struct ScoredToken {
    token: String,
    logprob: f64,
}

/// HTTP client for a top-k next-token service. One blocking request per
/// call; the agent is shared, requests are independent, retries are off.
pub struct RemoteModel {
    cfg: RemoteEndpointConfig,
    agent: ureq::Agent,
}

impl RemoteModel {
    pub fn new(cfg: RemoteEndpointConfig) -> Result<Self, LmError> {
        if cfg.top_k == 0 {
            return Err(LmError::Backend("top_k must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(RemoteModel { cfg, agent })
    }

    pub fn config(&self) -> &RemoteEndpointConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/distribution", self.cfg.base_url.trim_end_matches('/'))
    }
}

impl LanguageModel for RemoteModel {
    fn next_distribution(&self, context: &[&str]) -> Result<TokenDistribution, LmError> {
        let body = Request {
            context,
            top_k: self.cfg.top_k,
        };
        let mut resp = self
            .agent
            .post(&self.endpoint())
            .send_json(&body)
            .map_err(|e| LmError::Backend(e.to_string()))?;
        let parsed: Response = resp
            .body_mut()
            .read_json()
            .map_err(|e| LmError::Backend(format!("malformed response: {e}")))?;
        from_scored(parsed.tokens, context.len())
    }

    fn describe(&self) -> String {
        format!("remote({}, top_k={})", self.cfg.base_url, self.cfg.top_k)
    }
}

fn from_scored(tokens: Vec<ScoredToken>, context_len: usize) -> Result<TokenDistribution, LmError> {
    if tokens.is_empty() {
        return Err(LmError::Backend("empty token list".into()));
    }
    if let Some(t) = tokens.iter().find(|t| !t.logprob.is_finite() || t.logprob > 1e-9) {
        return Err(LmError::Backend(format!("invalid logprob {} for `{}`", t.logprob, t.token)));
    }
    let max = tokens.iter().map(|t| t.logprob).fold(f64::NEG_INFINITY, f64::max);
    let mut support: Vec<(Arc<str>, f64)> = Vec::with_capacity(tokens.len());
    for t in tokens {
        if support.iter().any(|(w, _)| **w == *t.token) {
            return Err(LmError::Backend(format!("duplicate token `{}`", t.token)));
        }
        support.push((Arc::from(t.token), (t.logprob - max).exp()));
    }
    let z: f64 = support.iter().map(|(_, p)| p).sum();
    for s in &mut support {
        s.1 /= z;
    }
    Ok(TokenDistribution::new(support, context_len, true))
}
