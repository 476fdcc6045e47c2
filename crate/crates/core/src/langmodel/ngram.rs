use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, TokenDistribution, BOS, EOS, UNK};

const FORMAT_VERSION: u32 = 1;
const SEP: char = '\u{1f}';

#[derive(Clone, Debug, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<usize, u64>,
}

/// Add-α smoothed n-gram model with no backoff.
#[derive(Clone, Debug)]
pub struct NgramModel {
    order: usize,
    alpha: f64,
    vocab: Vec<Arc<str>>,
    index: HashMap<Arc<str>, usize>,
    counts: HashMap<String, ContextCounts>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    order: usize,
    alpha: f64,
    vocabulary: Vec<String>,
    contexts: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    context: Vec<String>,
    next: BTreeMap<String, u64>,
}

fn check_params(order: usize, alpha: f64) -> Result<(), LmError> {
    if order == 0 {
        return Err(LmError::Training("order must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(LmError::Training(format!("smoothing constant must be positive, got {alpha}")));
    }
    Ok(())
}

/// Trains on tokenized sentences. Each sentence is padded with `order - 1`
/// start markers and closed with an end marker.
pub fn train_ngram<S: AsRef<str>>(
    sentences: &[Vec<S>],
    order: usize,
    alpha: f64,
) -> Result<NgramModel, LmError> {
    check_params(order, alpha)?;
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(LmError::Training("empty corpus".into()));
    }
    let mut words: Vec<&str> = sentences
        .iter()
        .flatten()
        .map(AsRef::as_ref)
        .chain([EOS, UNK])
        .collect();
    words.sort_unstable();
    words.dedup();
    let mut model = NgramModel::with_vocab(order, alpha, words);
    for s in sentences.iter().filter(|s| !s.is_empty()) {
        let mut padded: Vec<&str> = vec![BOS; order - 1];
        padded.extend(s.iter().map(AsRef::as_ref));
        padded.push(EOS);
        for i in (order - 1)..padded.len() {
            model.add_count(&padded[i + 1 - order..i], padded[i], 1);
        }
    }
    Ok(model)
}

impl NgramModel {
    fn with_vocab<'a>(order: usize, alpha: f64, words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab: Vec<Arc<str>> = words.into_iter().map(Arc::from).collect();
        vocab.sort();
        vocab.dedup();
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        NgramModel {
            order,
            alpha,
            vocab,
            index,
            counts: HashMap::new(),
        }
    }

    /// Model with no observations over exactly `words`.
    pub fn uniform<'a>(
        order: usize,
        alpha: f64,
        words: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, LmError> {
        check_params(order, alpha)?;
        let m = NgramModel::with_vocab(order, alpha, words);
        if m.vocab.is_empty() {
            return Err(LmError::Training("empty vocabulary".into()));
        }
        Ok(m)
    }

    /// Adds `count` observations of `word` after `context` (the last
    /// `order - 1` tokens are used). `word` must be in the vocabulary.
    pub fn add_count(&mut self, context: &[&str], word: &str, count: u64) {
        let key = self.context_key(context);
        let id = *self.index.get(word).expect("word in vocabulary");
        let entry = self.counts.entry(key).or_default();
        entry.total += count;
        *entry.next.entry(id).or_default() += count;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn words(&self) -> &[Arc<str>] {
        &self.vocab
    }

    pub fn count(&self, context: &[&str], word: &str) -> u64 {
        let Some(&id) = self.index.get(word) else {
            return 0;
        };
        self.counts
            .get(&self.context_key(context))
            .and_then(|c| c.next.get(&id).copied())
            .unwrap_or(0)
    }

    /// Last `order - 1` tokens, left-padded with start markers and with
    /// out-of-vocabulary words mapped to the unknown token.
    fn context_key(&self, context: &[&str]) -> String {
        let k = self.order - 1;
        let tail = &context[context.len().saturating_sub(k)..];
        let mut key = String::new();
        for i in 0..k {
            let tok = if i + tail.len() < k {
                BOS
            } else {
                let w = tail[i + tail.len() - k];
                if w == BOS || self.index.contains_key(w) {
                    w
                } else {
                    UNK
                }
            };
            if i > 0 {
                key.push(SEP);
            }
            key.push_str(tok);
        }
        key
    }

    pub fn to_json(&self) -> String {
        let mut contexts: Vec<ContextEntry> = self
            .counts
            .iter()
            .map(|(k, c)| ContextEntry {
                context: if self.order == 1 {
                    Vec::new()
                } else {
                    k.split(SEP).map(String::from).collect()
                },
                next: c
                    .next
                    .iter()
                    .map(|(&id, &n)| (self.vocab[id].to_string(), n))
                    .collect(),
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            order: self.order,
            alpha: self.alpha,
            vocabulary: self.vocab.iter().map(|w| w.to_string()).collect(),
            contexts,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| LmError::BadModel(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(LmError::BadModel(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        check_params(file.order, file.alpha).map_err(|e| LmError::BadModel(e.to_string()))?;
        let mut m = NgramModel::with_vocab(file.order, file.alpha, file.vocabulary.iter().map(String::as_str));
        for entry in &file.contexts {
            if entry.context.len() != file.order - 1 {
                return Err(LmError::BadModel(format!(
                    "context {:?} does not match order {}",
                    entry.context, file.order
                )));
            }
            let ctx: Vec<&str> = entry.context.iter().map(String::as_str).collect();
            for (w, &n) in &entry.next {
                if !m.index.contains_key(w.as_str()) {
                    return Err(LmError::BadModel(format!("`{w}` is not in the vocabulary")));
                }
                m.add_count(&ctx, w, n);
            }
        }
        Ok(m)
    }
}

impl LanguageModel for NgramModel {
    fn next_distribution(&self, context: &[&str]) -> Result<TokenDistribution, LmError> {
        let counts = self.counts.get(&self.context_key(context));
        let total = counts.map(|c| c.total).unwrap_or(0) as f64;
        let z = total + self.alpha * self.vocab.len() as f64;
        let support = self
            .vocab
            .iter()
            .enumerate()
            .map(|(id, w)| {
                let c = counts.and_then(|c| c.next.get(&id).copied()).unwrap_or(0) as f64;
                (w.clone(), (c + self.alpha) / z)
            })
            .collect();
        Ok(TokenDistribution::new(
            support,
            context.len().min(self.order - 1),
            false,
        ))
    }

    fn vocabulary(&self) -> Option<Vec<Arc<str>>> {
        Some(self.vocab.clone())
    }

    fn describe(&self) -> String {
        format!("ngram(order={}, alpha={}, vocab={})", self.order, self.alpha, self.vocab.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::score_line;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sentence(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn empty_unigram_is_uniform() {
        let m = NgramModel::uniform(1, 1.0, ["a", "b", "c", "d"]).unwrap();
        let d = m.next_distribution(&[]).unwrap();
        for w in ["a", "b", "c", "d"] {
            assert_abs_diff_eq!(d.prob(w), 0.25);
        }
        let s = score_line(&m, &["a", "c", "d"], &[]).unwrap();
        assert_abs_diff_eq!(s, 0.25f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(s, -1.3863, epsilon = 1e-4);
    }

    #[test]
    fn bigram_hand_counts() {
        let m = train_ngram(&[sentence("a b a b")], 2, 1e-9).unwrap();
        assert_eq!(m.count(&["a"], "b"), 2);
        let d = m.next_distribution(&["a"]).unwrap();
        assert_abs_diff_eq!(d.prob("b"), 1.0, epsilon = 1e-8);
        // vocabulary {a, b, </s>, <unk>}: (2 + 1) / (2 + 4)
        let m1 = train_ngram(&[sentence("a b a b")], 2, 1.0).unwrap();
        assert_abs_diff_eq!(m1.next_distribution(&["a"]).unwrap().prob("b"), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn smoothed_single_observation() {
        // one observation of a -> b over V = {a, b}: (1 + 1) / (1 + 2)
        let mut m = NgramModel::uniform(2, 1.0, ["a", "b"]).unwrap();
        m.add_count(&["a"], "b", 1);
        let s = score_line(&m, &["b"], &["a"]).unwrap();
        assert_abs_diff_eq!(s, (2.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(s, -0.4055, epsilon = 1e-4);
    }

    #[test]
    fn boundary_padding() {
        let m = train_ngram(&[sentence("a b")], 2, 1.0).unwrap();
        assert_eq!(m.count(&[BOS], "a"), 1);
        assert_eq!(m.count(&["a"], "b"), 1);
        assert_eq!(m.count(&["b"], EOS), 1);
        assert!(m.words().iter().any(|w| &**w == UNK));
        assert!(m.words().iter().all(|w| &**w != BOS));
    }

    #[test]
    fn unigram_ignores_context() {
        let m = train_ngram(&[sentence("a b b")], 1, 1.0).unwrap();
        assert_eq!(m.next_distribution(&["a"]).unwrap(), {
            let mut d = m.next_distribution(&["b", "x"]).unwrap();
            d.context_len = 0;
            d
        });
    }

    #[test]
    fn bad_parameters() {
        assert!(train_ngram(&[sentence("a")], 2, 0.0).is_err());
        assert!(train_ngram(&[sentence("a")], 0, 1.0).is_err());
        assert!(train_ngram::<String>(&[], 2, 1.0).is_err());
        assert!(train_ngram(&[sentence("")], 2, 1.0).is_err());
    }

    #[test]
    fn oov_context_maps_to_unknown() {
        let m = train_ngram(&[sentence("a b"), sentence("c d")], 2, 1.0).unwrap();
        assert_eq!(
            m.next_distribution(&["zzz"]).unwrap(),
            m.next_distribution(&[UNK]).unwrap()
        );
    }

    #[test]
    fn json_round_trip() {
        let m = train_ngram(&[sentence("a b c"), sentence("b c a")], 3, 0.5).unwrap();
        let back = NgramModel::from_json(&m.to_json()).unwrap();
        for ctx in [vec![], vec!["a"], vec!["a", "b"], vec!["c", "a"]] {
            assert_eq!(m.next_distribution(&ctx).unwrap(), back.next_distribution(&ctx).unwrap());
        }
        assert_eq!(m.to_json(), back.to_json());
        let bumped = m.to_json().replace("\"format_version\":1", "\"format_version\":2");
        assert!(NgramModel::from_json(&bumped).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
        let word = prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from);
        prop::collection::vec(prop::collection::vec(word, 1..6), 1..6)
    }

    proptest! {
        #[test]
        fn distributions_normalize(corpus in arb_corpus(), order in 1usize..4, alpha in 0.01f64..2.0,
                                   ctx in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "<s>", "q"]), 0..5)) {
            let m = train_ngram(&corpus, order, alpha).unwrap();
            let d = m.next_distribution(&ctx).unwrap();
            prop_assert!((d.total() - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|(_, p)| p > 0.0));
            let k = order - 1;
            let tail = &ctx[ctx.len().saturating_sub(k)..];
            let mut long = vec!["e", "d"];
            long.extend_from_slice(tail);
            let mut d2 = m.next_distribution(&long).unwrap();
            d2.context_len = d.context_len;
            if tail.len() == k {
                prop_assert_eq!(d, d2);
            }
        }

        #[test]
        fn concatenation_is_length_weighted(corpus in arb_corpus(), split in 1usize..4) {
            let m = train_ngram(&corpus, 2, 0.5).unwrap();
            let line: Vec<&str> = corpus[0].iter().chain(&corpus[0]).map(String::as_str).collect();
            let k = split.min(line.len() - 1);
            let (head, tail) = line.split_at(k);
            let whole = score_line(&m, &line, &[BOS]).unwrap();
            let a = score_line(&m, head, &[BOS]).unwrap();
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(head);
            let b = score_line(&m, tail, &prefix).unwrap();
            let combined = (a * head.len() as f64 + b * tail.len() as f64) / line.len() as f64;
            prop_assert!((whole - combined).abs() < 1e-9);
        }
    }
}
