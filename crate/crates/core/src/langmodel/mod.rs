//! Language-model contract: next-word distributions and the line scorer.

mod ngram;
mod remote;

use std::sync::Arc;

use thiserror::Error;

pub use ngram::{train_ngram, NgramModel};
pub use remote::{RemoteEndpointConfig, RemoteModel};

/// Line-start marker used both in training padding and generation contexts.
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("training failed: {0}")]
    Training(String),
    #[error("bad model file: {0}")]
    BadModel(String),
    #[error("scoring backend: {0}")]
    Backend(String),
    #[error("cannot score an empty line")]
    EmptyLine,
}

/// Next-word probabilities. The support is sorted by word.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    support: Vec<(Arc<str>, f64)>,
    pub context_len: usize,
    /// Set when the backend returned only part of the vocabulary, so a
    /// missing word means "not returned" rather than "impossible".
    pub truncated: bool,
}

impl TokenDistribution {
    pub fn new(mut support: Vec<(Arc<str>, f64)>, context_len: usize, truncated: bool) -> Self {
        support.sort_by(|a, b| a.0.cmp(&b.0));
        TokenDistribution {
            support,
            context_len,
            truncated,
        }
    }

    pub fn prob(&self, word: &str) -> f64 {
        self.support
            .binary_search_by(|(w, _)| w.as_ref().cmp(word))
            .map(|i| self.support[i].1)
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Arc<str>, f64)> {
        self.support.iter().map(|(w, p)| (w, *p))
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.support.iter().map(|(_, p)| p).sum()
    }

    /// Keeps the words accepted by `keep`; masses are left unnormalized.
    pub fn retain(&self, mut keep: impl FnMut(&str) -> bool) -> TokenDistribution {
        TokenDistribution {
            support: self
                .support
                .iter()
                .filter(|(w, p)| *p > 0.0 && keep(w))
                .cloned()
                .collect(),
            context_len: self.context_len,
            truncated: self.truncated,
        }
    }

    /// Rescales to sum one. `None` when no mass is left.
    pub fn normalized(&self) -> Option<TokenDistribution> {
        let z = self.total();
        if z <= 0.0 || !z.is_finite() {
            return None;
        }
        Some(TokenDistribution {
            support: self.support.iter().map(|(w, p)| (w.clone(), p / z)).collect(),
            context_len: self.context_len,
            truncated: self.truncated,
        })
    }
}

pub trait LanguageModel: Send + Sync {
    /// Distribution of the word following `context`.
    fn next_distribution(&self, context: &[&str]) -> Result<TokenDistribution, LmError>;

    /// Every word the model can emit, when known up front.
    fn vocabulary(&self) -> Option<Vec<Arc<str>>> {
        None
    }

    /// Short identifier recorded in run manifests.
    fn describe(&self) -> String;
}

/// Mean natural-log probability of `words` given `prefix`, each token
/// conditioned on everything before it. A zero-probability token yields
/// negative infinity.
pub fn score_line<S: AsRef<str>>(
    model: &dyn LanguageModel,
    words: &[S],
    prefix: &[S],
) -> Result<f64, LmError> {
    if words.is_empty() {
        return Err(LmError::EmptyLine);
    }
    let mut context: Vec<&str> = prefix.iter().map(AsRef::as_ref).collect();
    let mut sum = 0.0;
    for w in words {
        let p = model.next_distribution(&context)?.prob(w.as_ref());
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        sum += p.ln();
        context.push(w.as_ref());
    }
    Ok(sum / words.len() as f64)
}
