//! Storyline model: the line-final words y1..y5 for a prompt y0, drawn from
//! similarity-weighted conditionals with rhyme and name indicators.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langmodel::TokenDistribution;
use crate::phonetics::{fold, Lexicon, PhoneticsError, RhymeIndex};

pub const DEFAULT_MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum StorylineError {
    #[error("failed to read {what}: {source}")]
    Read {
        what: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding line {line}: {reason}")]
    BadEmbedding { line: usize, reason: String },
    #[error("no embeddings loaded")]
    NoEmbeddings,
    #[error("`{0}` has no embedding")]
    NotEmbedded(String),
    #[error("no usable names")]
    NoNames,
    #[error("empty support for {0}")]
    EmptySupport(Slot),
    #[error("no admissible word for {slot} after {attempts} attempts")]
    Exhausted { slot: Slot, attempts: usize },
    #[error("max_attempts must be at least 1")]
    ZeroAttempts,
    #[error(transparent)]
    Phonetics(#[from] PhoneticsError),
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EmbeddingReport {
    pub loaded: usize,
    pub zero_vectors: Vec<String>,
    pub duplicates: usize,
}

/// Word vectors, stored unit-normalized.
#[derive(Clone, Debug)]
pub struct EmbeddingSpace {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingSpace {
    /// Text format: optional `count dim` header, then `word v1 .. vd`.
    /// Zero vectors are skipped and reported; the first vector of a repeated
    /// word wins.
    pub fn load<R: BufRead>(source: R) -> Result<(Self, EmbeddingReport), StorylineError> {
        let mut dim: Option<usize> = None;
        let mut vectors = HashMap::new();
        let mut report = EmbeddingReport::default();
        for (idx, line) in source.lines().enumerate() {
            let line = line.map_err(|source| StorylineError::Read {
                what: "embeddings",
                source,
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if idx == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                dim = Some(fields[1].parse().expect("checked"));
                continue;
            }
            let bad = |reason: String| StorylineError::BadEmbedding {
                line: idx + 1,
                reason,
            };
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad("non-numeric component".into()))?;
            match dim {
                Some(d) if d != values.len() => {
                    return Err(bad(format!("expected {d} components, found {}", values.len())))
                }
                None if values.is_empty() => return Err(bad("no components".into())),
                None => dim = Some(values.len()),
                _ => {}
            }
            let word = fold(fields[0]);
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                report.zero_vectors.push(word);
                continue;
            }
            if vectors.contains_key(&word) {
                report.duplicates += 1;
                continue;
            }
            vectors.insert(word, values.into_iter().map(|v| v / norm).collect());
        }
        let dim = dim.ok_or(StorylineError::NoEmbeddings)?;
        if vectors.is_empty() {
            return Err(StorylineError::NoEmbeddings);
        }
        report.loaded = vectors.len();
        Ok((EmbeddingSpace { dim, vectors }, report))
    }

    pub fn from_vectors<'a>(
        entries: impl IntoIterator<Item = (&'a str, Vec<f64>)>,
    ) -> Result<Self, StorylineError> {
        let mut text = String::new();
        for (w, v) in entries {
            text.push_str(w);
            for x in v {
                text.push_str(&format!(" {x:e}"));
            }
            text.push('\n');
        }
        EmbeddingSpace::load(text.as_bytes()).map(|(s, _)| s)
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(&fold(word))
    }

    fn vector(&self, word: &str) -> Result<&[f64], StorylineError> {
        self.vectors
            .get(&fold(word))
            .map(Vec::as_slice)
            .ok_or_else(|| StorylineError::NotEmbedded(word.to_string()))
    }

    /// Cosine similarity mapped onto [0, 1].
    pub fn similarity(&self, w1: &str, w2: &str) -> Result<f64, StorylineError> {
        let (a, b) = (self.vector(w1)?, self.vector(w2)?);
        let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        Ok(((cos.clamp(-1.0, 1.0)) + 1.0) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Name {
    pub word: String,
    pub gender: Option<String>,
}

/// Person names with dictionary coverage.
#[derive(Clone, Debug, Default)]
pub struct NameLexicon {
    names: Vec<Name>,
}

impl NameLexicon {
    /// One name per line with an optional `,F` / `,M` suffix. Names without a
    /// pronunciation are dropped and returned alongside.
    pub fn load<R: BufRead>(source: R, lexicon: &Lexicon) -> Result<(Self, Vec<String>), StorylineError> {
        let mut names: Vec<Name> = Vec::new();
        let mut excluded = Vec::new();
        for line in source.lines() {
            let line = line.map_err(|source| StorylineError::Read {
                what: "names",
                source,
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, gender) = match line.split_once(',') {
                Some((w, g)) => (w.trim(), Some(g.trim().to_string()).filter(|g| !g.is_empty())),
                None => (line, None),
            };
            let word = fold(word);
            if !lexicon.contains(&word) {
                excluded.push(word);
            } else if !names.iter().any(|n| n.word == word) {
                names.push(Name { word, gender });
            }
        }
        if names.is_empty() {
            return Err(StorylineError::NoNames);
        }
        Ok((NameLexicon { names }, excluded))
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        NameLexicon {
            names: words
                .into_iter()
                .map(|w| Name {
                    word: fold(w),
                    gender: None,
                })
                .collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        let w = fold(word);
        self.names.iter().any(|n| n.word == w)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Name> {
        self.names.iter()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Which storyline conditional a word was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Y2,
    Y3,
    Y4,
    Y5,
    Y1,
}

impl Slot {
    /// Line whose final word this slot supplies.
    pub fn line(self) -> usize {
        match self {
            Slot::Y1 => 1,
            Slot::Y2 => 2,
            Slot::Y3 => 3,
            Slot::Y4 => 4,
            Slot::Y5 => 5,
        }
    }

    pub fn for_line(line: usize) -> Option<Slot> {
        match line {
            1 => Some(Slot::Y1),
            2 => Some(Slot::Y2),
            3 => Some(Slot::Y3),
            4 => Some(Slot::Y4),
            5 => Some(Slot::Y5),
            _ => None,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "y{}", self.line())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Storyline,
    LanguageModel,
}

/// Final words of the five lines plus the prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Storyline {
    pub y0: String,
    pub y1: String,
    pub y2: String,
    pub y3: String,
    pub y4: String,
    pub y5: String,
    /// Source of y1..y5, in line order.
    pub provenance: [Provenance; 5],
}

impl Storyline {
    pub fn finals(&self) -> [&str; 5] {
        [&self.y1, &self.y2, &self.y3, &self.y4, &self.y5]
    }

    /// Checks the rhyme and name invariants against `lexicon` and `names`.
    pub fn satisfies(&self, lexicon: &Lexicon, names: &NameLexicon) -> bool {
        let r = |a: &str, b: &str| lexicon.rhymes(a, b).unwrap_or(false);
        r(&self.y3, &self.y4)
            && r(&self.y1, &self.y2)
            && r(&self.y2, &self.y5)
            && r(&self.y1, &self.y5)
            && names.contains(&self.y1)
    }
}

/// Words the conditionals are conditioned on.
#[derive(Clone, Copy, Debug, Default)]
pub struct Given<'a> {
    pub y0: &'a str,
    pub y2: Option<&'a str>,
    pub y3: Option<&'a str>,
    pub y5: Option<&'a str>,
}

/// Conditionals over a fixed candidate support.
pub struct StorylineModel<'a> {
    lexicon: &'a Lexicon,
    space: &'a EmbeddingSpace,
    names: &'a NameLexicon,
    support: Vec<Arc<str>>,
    rhyme: RhymeIndex,
}

impl<'a> StorylineModel<'a> {
    /// Support is `vocabulary` restricted to words with both a pronunciation
    /// and an embedding.
    pub fn new<S: AsRef<str>>(
        lexicon: &'a Lexicon,
        space: &'a EmbeddingSpace,
        names: &'a NameLexicon,
        vocabulary: impl IntoIterator<Item = S>,
    ) -> Self {
        let mut support: Vec<Arc<str>> = vocabulary
            .into_iter()
            .map(|w| fold(w.as_ref()))
            .filter(|w| lexicon.contains(w) && space.contains(w))
            .map(Arc::from)
            .collect();
        support.sort();
        support.dedup();
        let rhyme = RhymeIndex::build(
            lexicon,
            support.iter().map(|w| &**w).chain(names.iter().map(|n| n.word.as_str())),
        );
        StorylineModel {
            lexicon,
            space,
            names,
            support,
            rhyme,
        }
    }

    pub fn support(&self) -> &[Arc<str>] {
        &self.support
    }

    pub fn lexicon(&self) -> &Lexicon {
        self.lexicon
    }

    pub fn names(&self) -> &NameLexicon {
        self.names
    }

    fn rhymes(&self, a: &str, b: &str) -> bool {
        if self.rhyme.contains(a) && self.rhyme.contains(b) {
            self.rhyme.rhymes(a, b)
        } else {
            self.lexicon.rhymes(a, b).unwrap_or(false)
        }
    }

    fn in_support(&self, w: &str) -> bool {
        self.support.binary_search_by(|s| (**s).cmp(w)).is_ok()
    }

    fn need(word: Option<&str>, slot: Slot) -> Result<&str, StorylineError> {
        word.ok_or(StorylineError::EmptySupport(slot))
    }

    /// Normalized conditional for `slot`. Words failing an indicator get no
    /// mass at all.
    pub fn conditional(&self, slot: Slot, given: &Given) -> Result<TokenDistribution, StorylineError> {
        let mut masses: Vec<(Arc<str>, f64)> = Vec::new();
        match slot {
            Slot::Y2 | Slot::Y3 => {
                for w in &self.support {
                    masses.push((w.clone(), self.space.similarity(w, given.y0)?));
                }
            }
            Slot::Y4 | Slot::Y5 => {
                let y2 = Self::need(given.y2, slot)?;
                let y3 = Self::need(given.y3, slot)?;
                let anchor = if slot == Slot::Y4 { y3 } else { y2 };
                for w in self.rhyme_partners(anchor) {
                    let mut m = 0.0;
                    for y in [given.y0, y2, y3] {
                        m += self.space.similarity(w, y)?;
                    }
                    masses.push((Arc::from(w), m));
                }
            }
            Slot::Y1 => {
                let y5 = Self::need(given.y5, slot)?;
                for n in self.names.iter() {
                    if self.rhymes(&n.word, y5) {
                        masses.push((Arc::from(n.word.as_str()), 1.0));
                    }
                }
            }
        }
        normalize_masses(masses).ok_or(StorylineError::EmptySupport(slot))
    }

    /// Support words rhyming with `w`.
    pub fn rhyme_partners(&self, w: &str) -> Vec<&str> {
        if self.rhyme.contains(w) {
            self.rhyme.partners(w).into_iter().filter(|v| self.in_support(v)).collect()
        } else {
            self.support.iter().map(|v| &**v).filter(|v| self.rhymes(v, w)).collect()
        }
    }

    /// Whether `w` can still close lines 2, 5 and 1: some other support word
    /// and some name rhyme with it and with each other.
    pub fn viable_y2(&self, w: &str) -> bool {
        let partners = self.rhyme_partners(w);
        self.names.iter().any(|n| {
            self.rhymes(&n.word, w) && partners.iter().any(|v| self.rhymes(&n.word, v))
        })
    }

    /// Whether some other support word rhymes with `w`.
    pub fn viable_y3(&self, w: &str) -> bool {
        !self.rhyme_partners(w).is_empty()
    }

    /// Whether some name rhymes with both `w` and `y2`.
    pub fn viable_y5(&self, w: &str, y2: &str) -> bool {
        self.names
            .iter()
            .any(|n| self.rhymes(&n.word, w) && self.rhymes(&n.word, y2))
    }
}

/// Turns nonnegative masses into a distribution; `None` when nothing is left.
pub fn normalize_masses(masses: Vec<(Arc<str>, f64)>) -> Option<TokenDistribution> {
    let kept: Vec<(Arc<str>, f64)> = masses.into_iter().filter(|(_, m)| *m > 0.0).collect();
    TokenDistribution::new(kept, 0, false).normalized()
}

/// Draws from `dist` until `accept` passes. Returns the word and the number
/// of draws used.
pub fn sample_word_constrained<R: Rng + ?Sized>(
    dist: &TokenDistribution,
    accept: impl Fn(&str) -> bool,
    max_attempts: usize,
    slot: Slot,
    rng: &mut R,
) -> Result<(String, usize), StorylineError> {
    if max_attempts == 0 {
        return Err(StorylineError::ZeroAttempts);
    }
    let words: Vec<(&Arc<str>, f64)> = dist.iter().filter(|(_, p)| *p > 0.0).collect();
    let index = WeightedIndex::new(words.iter().map(|(_, p)| *p))
        .map_err(|_| StorylineError::EmptySupport(slot))?;
    for attempt in 1..=max_attempts {
        let w = words[index.sample(rng)].0;
        if accept(w) {
            return Ok((w.to_string(), attempt));
        }
    }
    Err(StorylineError::Exhausted {
        slot,
        attempts: max_attempts,
    })
}

/// Deterministic counterpart: the most probable accepted word, ties to the
/// lexicographically smaller word.
pub fn argmax_word_constrained(
    dist: &TokenDistribution,
    accept: impl Fn(&str) -> bool,
    slot: Slot,
) -> Result<String, StorylineError> {
    let mut best: Option<(&Arc<str>, f64)> = None;
    for (w, p) in dist.iter() {
        if p > 0.0 && accept(w) && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((w, p));
        }
    }
    best.map(|(w, _)| w.to_string())
        .ok_or(StorylineError::EmptySupport(slot))
}

/// Samples a complete storyline in the order y2, y3, y4, y5, y1. Repeated
/// words are rejected, and y2/y3/y5 must leave the later slots satisfiable.
pub fn sample_storyline(
    model: &StorylineModel,
    prompt: &str,
    seed: u64,
    max_attempts: usize,
) -> Result<Storyline, StorylineError> {
    let y0 = fold(prompt);
    if !model.space.contains(&y0) {
        return Err(StorylineError::NotEmbedded(y0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut given = Given {
        y0: &y0,
        ..Default::default()
    };
    let mut cache: BTreeMap<Slot, TokenDistribution> = BTreeMap::new();
    let mut dist = |slot: Slot, given: &Given| -> Result<TokenDistribution, StorylineError> {
        if let Some(d) = cache.get(&slot) {
            return Ok(d.clone());
        }
        let d = model.conditional(slot, given)?;
        if matches!(slot, Slot::Y2 | Slot::Y3) {
            cache.insert(slot, d.clone());
        }
        Ok(d)
    };

    let (y2, _) = sample_word_constrained(
        &dist(Slot::Y2, &given)?,
        |w| model.viable_y2(w),
        max_attempts,
        Slot::Y2,
        &mut rng,
    )?;
    given.y2 = Some(&y2);
    let (y3, _) = sample_word_constrained(
        &dist(Slot::Y3, &given)?,
        |w| w != y2 && model.viable_y3(w),
        max_attempts,
        Slot::Y3,
        &mut rng,
    )?;
    given.y3 = Some(&y3);
    let (y4, _) = sample_word_constrained(
        &dist(Slot::Y4, &given)?,
        |w| w != y2 && w != y3,
        max_attempts,
        Slot::Y4,
        &mut rng,
    )?;
    let (y5, _) = sample_word_constrained(
        &dist(Slot::Y5, &given)?,
        |w| w != y2 && w != y3 && w != y4 && model.viable_y5(w, &y2),
        max_attempts,
        Slot::Y5,
        &mut rng,
    )?;
    given.y5 = Some(&y5);
    let (y1, _) = sample_word_constrained(
        &dist(Slot::Y1, &given)?,
        |w| model.rhymes(w, &y2) && ![&y2, &y3, &y4, &y5].contains(&&w.to_string()),
        max_attempts,
        Slot::Y1,
        &mut rng,
    )?;
    Ok(Storyline {
        y0,
        y1,
        y2,
        y3,
        y4,
        y5,
        provenance: [Provenance::Storyline; 5],
    })
}
