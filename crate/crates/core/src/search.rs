//! Decoding core: the meter filter, template-constrained candidate
//! extension, multi-template beam selection and the global top-N baseline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::langmodel::{LanguageModel, LmError, TokenDistribution};
use crate::phonetics::{Lexicon, LineMeter, MeterSpec, Stress};
use crate::templates::{PosTag, PosWeights, PrefixNode, TagLexicon, TemplateBank};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Total beam size N.
    pub beam: usize,
    /// Per-template beam size n.
    pub per_template: usize,
    pub rng_seed: u64,
    pub max_line_tokens: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 360,
            per_template: 12,
            rng_seed: 0,
            max_line_tokens: 12,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.per_template == 0 {
            return Err("per-template beam size must be at least 1".into());
        }
        if self.per_template > self.beam {
            return Err(format!(
                "per-template beam size {} exceeds total beam size {}",
                self.per_template, self.beam
            ));
        }
        if self.max_line_tokens == 0 {
            return Err("max_line_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WordInfo {
    pub tag: PosTag,
    /// Stress pattern of each pronunciation, in dictionary order.
    pub patterns: Vec<Vec<Stress>>,
}

/// Words the engine may emit: known to the model, the pronouncing
/// dictionary and the tagger.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary {
    words: Vec<Arc<str>>,
    info: HashMap<Arc<str>, WordInfo>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(
        candidates: impl IntoIterator<Item = S>,
        lexicon: &Lexicon,
        tags: &TagLexicon,
    ) -> Self {
        let mut vocab = Vocabulary::default();
        for w in candidates {
            let w = w.as_ref();
            if vocab.info.contains_key(w) {
                continue;
            }
            let (Ok(patterns), Some(tag)) = (lexicon.stress_patterns(w), tags.tag_of(w)) else {
                continue;
            };
            let w: Arc<str> = Arc::from(w);
            vocab.words.push(w.clone());
            vocab.info.insert(w, WordInfo { tag, patterns });
        }
        vocab.words.sort();
        vocab
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[Arc<str>] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&WordInfo> {
        self.info.get(word)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.info.contains_key(word)
    }

    /// Pronunciations of `word` that fit `meter` at `offset`, as
    /// `(index, syllables)`.
    pub fn fits<'a>(
        &'a self,
        word: &str,
        meter: &'a LineMeter,
        offset: usize,
    ) -> impl Iterator<Item = (usize, usize)> + 'a {
        self.info
            .get(word)
            .into_iter()
            .flat_map(|i| i.patterns.iter().enumerate())
            .filter(move |(_, p)| meter.fits(offset, p))
            .map(|(k, p)| (k, p.len()))
    }

    /// First pronunciation that fits at `offset` and ends the line exactly.
    pub fn fit_final(&self, word: &str, meter: &LineMeter, offset: usize) -> Option<(usize, usize)> {
        self.fits(word, meter, offset)
            .find(|(_, syl)| offset + syl == meter.syllables)
    }
}

/// A line under construction, with the prefix it is conditioned on.
#[derive(Clone, Debug)]
pub struct PartialLine {
    pub line_idx: usize,
    /// Index of the partial poem this line extends.
    pub origin: usize,
    /// Language-model context preceding the first word of the line.
    pub context: Arc<[Arc<str>]>,
    pub words: Vec<Arc<str>>,
    pub tags: Vec<PosTag>,
    /// Chosen pronunciation index per word.
    pub pronunciations: Vec<usize>,
    pub syllables_used: usize,
    pub sum_logprob: f64,
    /// Constrained-sampling draws spent on this line's final word.
    pub attempts: usize,
    node: PrefixNode,
}

impl PartialLine {
    /// Empty line; `None` when the bank has no templates for `line_idx`.
    pub fn start(
        bank: &TemplateBank,
        line_idx: usize,
        origin: usize,
        context: Arc<[Arc<str>]>,
    ) -> Option<Self> {
        Some(PartialLine {
            line_idx,
            origin,
            context,
            words: Vec::new(),
            tags: Vec::new(),
            pronunciations: Vec::new(),
            syllables_used: 0,
            sum_logprob: 0.0,
            attempts: 0,
            node: bank.root(line_idx)?,
        })
    }

    pub fn node(&self) -> PrefixNode {
        self.node
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Mean log-probability per token (zero for an empty line).
    pub fn mean_logprob(&self) -> f64 {
        if self.words.is_empty() {
            0.0
        } else {
            self.sum_logprob / self.words.len() as f64
        }
    }

    /// Geometric-mean token probability, the positive scorer used by MTBS.
    pub fn score(&self) -> f64 {
        self.mean_logprob().exp()
    }

    pub fn lm_context(&self) -> Vec<&str> {
        self.context
            .iter()
            .chain(&self.words)
            .map(|w| &**w)
            .collect()
    }

    /// Appends one word; `node` must be the trie child for `tag`.
    pub fn extended(
        &self,
        word: Arc<str>,
        tag: PosTag,
        node: PrefixNode,
        pronunciation: usize,
        syllables: usize,
        logprob: f64,
    ) -> Self {
        let mut next = self.clone();
        next.words.push(word);
        next.tags.push(tag);
        next.pronunciations.push(pronunciation);
        next.syllables_used += syllables;
        next.sum_logprob += logprob;
        next.node = node;
        next
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| &**w).collect::<Vec<_>>().join(" ")
    }
}

/// Zeroes every word that cannot be placed at the line's current offset.
/// Survivors keep their original (unnormalized) mass.
pub fn filter_distribution(
    dist: &TokenDistribution,
    line: &PartialLine,
    meter: &MeterSpec,
    vocab: &Vocabulary,
) -> TokenDistribution {
    let Ok(lm) = meter.line(line.line_idx) else {
        return dist.retain(|_| false);
    };
    dist.retain(|w| vocab.fits(w, lm, line.syllables_used).next().is_some())
}

/// Result of one extension step.
#[derive(Clone, Debug, Default)]
pub struct Extension {
    /// Lines that can keep growing.
    pub partials: Vec<PartialLine>,
    /// Lines that end exactly on a template and the syllable target, and
    /// that passed the caller's completion check.
    pub completed: Vec<PartialLine>,
}

/// Extends every entry by one word. Entries are processed in parallel and
/// merged in input order.
pub fn extend_candidates(
    beam: &[PartialLine],
    model: &dyn LanguageModel,
    bank: &TemplateBank,
    meter: &MeterSpec,
    vocab: &Vocabulary,
    accept_completion: &(dyn Fn(&PartialLine) -> bool + Sync),
) -> Result<Extension, LmError> {
    let per_entry: Vec<Result<Extension, LmError>> = beam
        .par_iter()
        .map(|entry| extend_one(entry, model, bank, meter, vocab, accept_completion))
        .collect();
    let mut out = Extension::default();
    for ext in per_entry {
        let ext = ext?;
        out.partials.extend(ext.partials);
        out.completed.extend(ext.completed);
    }
    Ok(out)
}

fn extend_one(
    entry: &PartialLine,
    model: &dyn LanguageModel,
    bank: &TemplateBank,
    meter: &MeterSpec,
    vocab: &Vocabulary,
    accept_completion: &(dyn Fn(&PartialLine) -> bool + Sync),
) -> Result<Extension, LmError> {
    let mut out = Extension::default();
    let Ok(lm) = meter.line(entry.line_idx) else {
        return Ok(out);
    };
    let dist = model.next_distribution(&entry.lm_context())?;
    let filtered = filter_distribution(&dist, entry, meter, vocab);
    for (word, p) in filtered.iter() {
        let info = vocab.get(word).expect("filtered words are in the vocabulary");
        let Some(node) = bank.child(entry.line_idx, entry.node, &info.tag) else {
            continue;
        };
        for (pron, syl) in vocab.fits(word, lm, entry.syllables_used) {
            let end = entry.syllables_used + syl;
            let ext = || entry.extended(word.clone(), info.tag.clone(), node, pron, syl, p.ln());
            if end == lm.syllables && bank.terminal(entry.line_idx, node).is_some() {
                let line = ext();
                if accept_completion(&line) {
                    out.completed.push(line);
                    break;
                }
            } else if end < lm.syllables && bank.extends(entry.line_idx, node) {
                out.partials.push(ext());
                break;
            }
        }
    }
    Ok(out)
}

/// Higher score first, then words, then origin.
fn by_score(a: &PartialLine, b: &PartialLine) -> Ordering {
    b.mean_logprob()
        .total_cmp(&a.mean_logprob())
        .then_with(|| a.words.cmp(&b.words))
        .then_with(|| a.origin.cmp(&b.origin))
}

/// Selection order of template subsets. Starts from the subset with the
/// largest aggregate `h`, then repeatedly takes the remaining subset
/// maximising `h_i * sum_k diversity(i, k)` over the subsets already taken,
/// while `taken + n <= beam`. Ties go to the lower index.
pub fn mtbs_subset_order(
    h: &[f64],
    sizes: &[usize],
    diversity: impl Fn(usize, usize) -> f64,
    per_template: usize,
    beam: usize,
) -> Vec<usize> {
    assert_eq!(h.len(), sizes.len());
    if h.is_empty() {
        return Vec::new();
    }
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        vals.fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, bv)) if v <= bv => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
    };
    let first = argmax(&mut h.iter().copied().enumerate()).expect("nonempty");
    let mut taken = vec![first];
    let mut size = sizes[first].min(per_template);
    let mut remaining: Vec<usize> = (0..h.len()).filter(|&i| i != first).collect();
    while !remaining.is_empty() && size + per_template <= beam {
        let next = argmax(&mut remaining.iter().map(|&i| {
            let div: f64 = taken.iter().map(|&k| diversity(i, k)).sum();
            (i, h[i] * div)
        }))
        .expect("nonempty");
        remaining.retain(|&i| i != next);
        taken.push(next);
        size += sizes[next].min(per_template);
    }
    taken
}

/// Multi-template beam selection over candidates grouped by tag sequence.
pub fn mtbs_select(
    candidates: Vec<PartialLine>,
    weights: &PosWeights,
    cfg: &SearchConfig,
) -> Vec<PartialLine> {
    let mut groups: BTreeMap<Vec<PosTag>, Vec<PartialLine>> = BTreeMap::new();
    for c in candidates {
        groups.entry(c.tags.clone()).or_default().push(c);
    }
    let mut groups: Vec<(Vec<PosTag>, Vec<PartialLine>)> = groups.into_iter().collect();
    for (_, g) in &mut groups {
        g.sort_by(by_score);
        g.truncate(cfg.per_template);
    }
    let h: Vec<f64> = groups
        .iter()
        .map(|(_, g)| g.iter().map(PartialLine::score).sum::<f64>() / g.len() as f64)
        .collect();
    let sizes: Vec<usize> = groups.iter().map(|(_, g)| g.len()).collect();
    let order = mtbs_subset_order(
        &h,
        &sizes,
        |i, k| weights.padded_distance(&groups[i].0, &groups[k].0),
        cfg.per_template,
        cfg.beam,
    );
    let mut slots: Vec<Option<Vec<PartialLine>>> = groups.into_iter().map(|(_, g)| Some(g)).collect();
    order
        .into_iter()
        .flat_map(|i| slots[i].take().expect("each subset taken once"))
        .collect()
}

/// Global top-N by mean log-probability, best first.
pub fn candidate_rank_select(mut candidates: Vec<PartialLine>, cfg: &SearchConfig) -> Vec<PartialLine> {
    candidates.sort_by(by_score);
    candidates.truncate(cfg.beam);
    candidates
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Mtbs,
    CandidateRank,
}

impl Selector {
    pub fn select(
        self,
        candidates: Vec<PartialLine>,
        weights: &PosWeights,
        cfg: &SearchConfig,
    ) -> Vec<PartialLine> {
        match self {
            Selector::Mtbs => mtbs_select(candidates, weights, cfg),
            Selector::CandidateRank => candidate_rank_select(candidates, cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::NgramModel;
    use crate::phonetics::load_lexicon;
    use crate::templates::{tags, LineTemplate};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const DICT: &str = "\
WHO  HH UW1
ATE  EY1 T
BOUGHT  B AO1 T
A  AH0
BIG  B IH1 G
CAKE  K EY1 K
HAT  HH AE1 T
RED  R EH1 D
BANANA  B AH0 N AE1 N AH0
ABOUT  AH0 B AW1 T
";

    fn fixture() -> (Lexicon, TagLexicon, TemplateBank) {
        let lex = load_lexicon(DICT.as_bytes()).unwrap().0;
        let tl = TagLexicon::from_pairs(
            [("ate", "VBD"), ("bought", "VBD"), ("big", "JJ"), ("red", "JJ"), ("cake", "NN"), ("hat", "NN"), ("banana", "NN"), ("about", "IN")],
            ["who", "a"],
        );
        let bank = TemplateBank::from_templates(vec![
            LineTemplate { id: "t0".into(), line_idx: 3, tags: tags("WHO VBD A JJ NN"), source_id: "x".into() },
            LineTemplate { id: "t1".into(), line_idx: 3, tags: tags("WHO VBD A NN"), source_id: "x".into() },
        ])
        .unwrap();
        (lex, tl, bank)
    }

    fn line(bank: &TemplateBank, vocab: &Vocabulary, meter: &MeterSpec, words: &[&str]) -> PartialLine {
        let mut l = PartialLine::start(bank, 3, 0, Arc::from(vec![Arc::from("<s>")])).unwrap();
        let lm = meter.line(3).unwrap();
        for w in words {
            let info = vocab.get(w).unwrap();
            let node = bank.child(3, l.node(), &info.tag).unwrap();
            let (pron, syl) = vocab.fits(w, lm, l.syllables_used).next().unwrap();
            l = l.extended(Arc::from(*w), info.tag.clone(), node, pron, syl, -1.0);
        }
        l
    }

    fn words_of(l: &PartialLine) -> Vec<&str> {
        l.words.iter().map(|w| &**w).collect()
    }

    #[test]
    fn filter_examples() {
        let (lex, tl, bank) = fixture();
        let vocab = Vocabulary::build(lex.words(), &lex, &tl);
        let meter = MeterSpec::limerick();
        let all: Vec<&str> = lex.words().collect();
        let model = NgramModel::uniform(1, 1.0, all.iter().copied()).unwrap();
        let dist = model.next_distribution(&[]).unwrap();
        // offset 0 of a six-syllable line: "banana" (u s u) puts a stress on position 2
        let start = PartialLine::start(&bank, 3, 0, Arc::from(Vec::new())).unwrap();
        let f = filter_distribution(&dist, &start, &meter, &vocab);
        assert_eq!(f.prob("banana"), 0.0);
        assert_eq!(f.prob("cake"), dist.prob("cake"));
        let mut at1 = start.clone();
        at1.syllables_used = 1;
        assert_eq!(filter_distribution(&dist, &at1, &meter, &vocab).prob("about"), dist.prob("about"));
        // offset 5: the next syllable is stressed position 6, unstressed starts are out
        let mut at5 = start.clone();
        at5.syllables_used = 5;
        let f = filter_distribution(&dist, &at5, &meter, &vocab);
        assert_eq!(f.prob("about"), 0.0);
        assert_eq!(f.prob("banana"), 0.0);
        assert_eq!(f.prob("cake"), dist.prob("cake"));
        // monosyllables everywhere: already clean, masses unchanged
        let mono = NgramModel::uniform(1, 1.0, ["cake", "hat", "a"]).unwrap();
        let d = mono.next_distribution(&[]).unwrap();
        assert_eq!(filter_distribution(&d, &start, &meter, &vocab), d);
    }

    #[test]
    fn branching_into_two_partial_templates() {
        let (lex, tl, bank) = fixture();
        let vocab = Vocabulary::build(lex.words(), &lex, &tl);
        let meter = MeterSpec::limerick();
        let model = NgramModel::uniform(1, 1.0, ["big", "red", "cake", "hat", "who", "ate"]).unwrap();
        let beam = vec![
            line(&bank, &vocab, &meter, &["who", "ate", "a"]),
            line(&bank, &vocab, &meter, &["who", "bought", "a"]),
        ];
        let ext = extend_candidates(&beam, &model, &bank, &meter, &vocab, &|_| true).unwrap();
        let partial_tags: std::collections::BTreeSet<String> =
            ext.partials.iter().map(|l| crate::templates::render(&l.tags)).collect();
        assert_eq!(partial_tags, ["WHO VBD A JJ".to_string()].into_iter().collect());
        let done: std::collections::BTreeSet<String> =
            ext.completed.iter().map(|l| crate::templates::render(&l.tags)).collect();
        // four syllables cannot finish a six-syllable line
        assert!(done.is_empty());
        for l in &ext.partials {
            assert!(bank.viable_prefix(3, &l.tags));
            assert_abs_diff_eq!(l.sum_logprob, -3.0 + (1.0f64 / 6.0).ln(), epsilon = 1e-12);
        }
        let ext = extend_candidates(&[], &model, &bank, &meter, &vocab, &|_| true).unwrap();
        assert!(ext.partials.is_empty() && ext.completed.is_empty());
    }

    #[test]
    fn completion_requires_template_and_syllables() {
        let (lex, tl, bank) = fixture();
        let vocab = Vocabulary::build(lex.words(), &lex, &tl);
        let meter = MeterSpec::new(vec![
            crate::phonetics::LineMeter { syllables: 9, stressed: [3, 6, 9].into() },
            crate::phonetics::LineMeter { syllables: 9, stressed: [3, 6, 9].into() },
            crate::phonetics::LineMeter { syllables: 5, stressed: [].into() },
        ])
        .unwrap();
        let model = NgramModel::uniform(1, 1.0, ["big", "cake", "hat", "who"]).unwrap();
        let beam = vec![line(&bank, &vocab, &meter, &["who", "ate", "a", "big"])];
        let ext = extend_candidates(&beam, &model, &bank, &meter, &vocab, &|_| true).unwrap();
        let done: Vec<Vec<&str>> = ext.completed.iter().map(words_of).collect();
        assert_eq!(done, vec![vec!["who", "ate", "a", "big", "cake"], vec!["who", "ate", "a", "big", "hat"]]);
        let ext = extend_candidates(&beam, &model, &bank, &meter, &vocab, &|l| &**l.words.last().unwrap() == "hat").unwrap();
        assert_eq!(ext.completed.len(), 1);
    }

    fn cand(tagstr: &str, words: &str, score: f64) -> PartialLine {
        let t = tags(tagstr);
        let w: Vec<Arc<str>> = words.split_whitespace().map(Arc::from).collect();
        let n = w.len();
        PartialLine {
            line_idx: 2,
            origin: 0,
            context: Arc::from(Vec::new()),
            pronunciations: vec![0; n],
            syllables_used: n,
            words: w,
            tags: t,
            sum_logprob: score.ln() * n as f64,
            attempts: 0,
            node: PrefixNode::default(),
        }
    }

    fn weights(pairs: &[(&str, usize)]) -> PosWeights {
        PosWeights::from_counts(2, &pairs.iter().map(|(t, c)| (PosTag::new(t), *c)).collect()).unwrap()
    }

    #[test]
    fn mtbs_examples() {
        let w = weights(&[("A", 1), ("B", 1), ("C", 1)]);
        let cfg = SearchConfig { beam: 4, per_template: 2, ..Default::default() };
        let out = mtbs_select(
            vec![cand("A", "x", 0.9), cand("B", "y", 0.8), cand("A", "z", 0.7), cand("A", "q", 0.95)],
            &w,
            &cfg,
        );
        let got: Vec<String> = out.iter().map(PartialLine::text).collect();
        assert_eq!(got, vec!["q", "x", "y"]);
        // two subsets, h = (0.9, 0.8), diversity 0.5: first then second
        let order = mtbs_subset_order(&[0.9, 0.8], &[1, 1], |_, _| 0.5, 1, 10);
        assert_eq!(order, vec![0, 1]);
        assert!(mtbs_select(Vec::new(), &w, &cfg).is_empty());
    }

    #[test]
    fn quality_floor_needs_n_of_one() {
        // n = 2: the 0.9 line sits in a subset with h = 0.5, beaten by h = 0.6
        let w = weights(&[("A", 1), ("B", 1)]);
        let cfg = SearchConfig { beam: 3, per_template: 2, ..Default::default() };
        let out = mtbs_select(
            vec![cand("A", "a1", 0.9), cand("A", "a2", 0.1), cand("B", "b1", 0.6), cand("B", "b2", 0.6)],
            &w,
            &cfg,
        );
        assert!(out.iter().all(|l| l.tags == tags("B")));
    }

    #[test]
    fn candidate_rank_examples() {
        let cfg = SearchConfig { beam: 10, per_template: 1, ..Default::default() };
        let out = candidate_rank_select(vec![cand("A", "b", 0.5), cand("A", "a", 0.5), cand("B", "c", 0.7)], &cfg);
        let got: Vec<String> = out.iter().map(PartialLine::text).collect();
        assert_eq!(got, vec!["c", "a", "b"]);
    }

    #[test]
    fn vocabulary_requires_all_three_sources() {
        let (lex, tl, _) = fixture();
        let v = Vocabulary::build(["cake", "who", "zebra", "<unk>", "</s>"], &lex, &tl);
        assert_eq!(v.words().iter().map(|w| &**w).collect::<Vec<_>>(), vec!["cake", "who"]);
        let bare = TagLexicon::from_pairs([], ["who"]);
        assert_eq!(Vocabulary::build(["cake", "who"], &lex, &bare).len(), 1);
    }

    fn arb_cands(templates: usize) -> impl Strategy<Value = Vec<(usize, u32)>> {
        prop::collection::vec((0..templates, 1u32..1000), 1..40)
    }

    fn build(raw: &[(usize, u32)]) -> Vec<PartialLine> {
        const T: [&str; 4] = ["A A", "A B", "B C", "C C"];
        raw.iter()
            .enumerate()
            .map(|(i, &(t, s))| cand(T[t], &format!("w{i} v"), s as f64 / 1000.0))
            .collect()
    }

    proptest! {
        #[test]
        fn single_template_is_plain_top_n(raw in arb_cands(1), n in 1usize..8, extra in 0usize..8) {
            let cfg = SearchConfig { beam: n + extra, per_template: n, ..Default::default() };
            let w = weights(&[("A", 2)]);
            let cands = build(&raw);
            let mut brute = cands.clone();
            brute.sort_by(|a, b| b.sum_logprob.partial_cmp(&a.sum_logprob).unwrap().then(a.words.cmp(&b.words)));
            brute.truncate(n);
            let got = mtbs_select(cands, &w, &cfg);
            prop_assert_eq!(got.iter().map(PartialLine::text).collect::<Vec<_>>(), brute.iter().map(PartialLine::text).collect::<Vec<_>>());
        }

        #[test]
        fn beam_bounds_and_best_kept_with_n_one(raw in arb_cands(4), n in 1usize..5, beam in 1usize..20) {
            let beam = beam.max(n);
            let cfg = SearchConfig { beam, per_template: n, ..Default::default() };
            let w = weights(&[("A", 3), ("B", 2), ("C", 3)]);
            let cands = build(&raw);
            let m = cands.iter().map(|c| c.tags.clone()).collect::<std::collections::BTreeSet<_>>().len();
            let best = cands.iter().cloned().min_by(by_score).unwrap();
            let out = mtbs_select(cands.clone(), &w, &cfg);
            prop_assert!(out.len() <= beam);
            prop_assert!(out.len() <= m * n);
            prop_assert!(!out.is_empty());
            if n == 1 {
                prop_assert!(out.iter().any(|l| l.words == best.words));
            }
            prop_assert_eq!(
                out.iter().map(PartialLine::text).collect::<Vec<_>>(),
                mtbs_select(cands, &w, &cfg).iter().map(PartialLine::text).collect::<Vec<_>>()
            );
        }

        #[test]
        fn candidate_rank_is_brute_force_top_n(raw in arb_cands(4), beam in 1usize..12) {
            let cfg = SearchConfig { beam, per_template: 1, ..Default::default() };
            let cands = build(&raw);
            let mut brute = cands.clone();
            brute.sort_by(|a, b| b.mean_logprob().partial_cmp(&a.mean_logprob()).unwrap().then(a.words.cmp(&b.words)));
            brute.truncate(beam);
            let got = candidate_rank_select(cands, &cfg);
            prop_assert_eq!(got.iter().map(PartialLine::text).collect::<Vec<_>>(), brute.iter().map(PartialLine::text).collect::<Vec<_>>());
        }
    }
}
