//! Part-of-speech templates: corpus ingestion, the per-line template bank with
//! its prefix trie, tag weights and the weighted hamming diversity score.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phonetics::fold;

/// Lines the template machinery covers; line 1 is generated from patterns.
pub const TEMPLATE_LINES: std::ops::RangeInclusive<usize> = 2..=5;
const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read {what}: {source}")]
    Read {
        what: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot tag word `{0}`")]
    Untaggable(String),
    #[error("corpus record {id}: {reason}")]
    BadRecord { id: String, reason: String },
    #[error("corpus line {line}: {reason}")]
    BadCorpusLine { line: usize, reason: String },
    #[error("no templates")]
    NoTemplates,
    #[error("line {0} has no templates")]
    EmptyLine(usize),
    #[error("line index {0} outside 2..=5")]
    LineIndex(usize),
    #[error("templates differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("tag `{0}` has no weight")]
    UnweightedTag(PosTag),
    #[error("tag `{tag}` in template {template} is not in the tag inventory")]
    UnknownTag { tag: PosTag, template: String },
    #[error("bad template bank: {0}")]
    BadBank(String),
}

/// A part-of-speech symbol (Penn-style or a lifted literal such as `WHO`).
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct PosTag(Arc<str>);

impl PosTag {
    pub fn new(symbol: &str) -> Self {
        PosTag(Arc::from(symbol))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<String> for PosTag {
    fn from(s: String) -> Self {
        PosTag(Arc::from(s))
    }
}

impl From<PosTag> for String {
    fn from(t: PosTag) -> Self {
        t.0.to_string()
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn tags(symbols: &str) -> Vec<PosTag> {
    symbols.split_whitespace().map(PosTag::new).collect()
}

pub fn render(tags: &[PosTag]) -> String {
    tags.iter().map(PosTag::as_str).collect::<Vec<_>>().join(" ")
}

/// Word → tag lookup with closed-class words lifted to literal tags.
#[derive(Clone, Debug, Default)]
pub struct TagLexicon {
    tags: HashMap<String, PosTag>,
    literals: BTreeSet<String>,
}

impl TagLexicon {
    /// Reads `word<TAB>TAG` lines and a one-word-per-line literal list. The
    /// first tag listed for a word wins.
    pub fn load<R1: BufRead, R2: BufRead>(tags: R1, literals: R2) -> Result<Self, TemplateError> {
        let mut lex = TagLexicon::default();
        for (idx, line) in tags.lines().enumerate() {
            let line = line.map_err(|source| TemplateError::Read {
                what: "tag lexicon",
                source,
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(w), Some(t), None) => {
                    lex.tags.entry(fold(w)).or_insert_with(|| PosTag::new(t));
                }
                _ => {
                    return Err(TemplateError::BadCorpusLine {
                        line: idx + 1,
                        reason: format!("expected `word<TAB>TAG`, got `{trimmed}`"),
                    })
                }
            }
        }
        for line in literals.lines() {
            let line = line.map_err(|source| TemplateError::Read {
                what: "literal list",
                source,
            })?;
            let w = line.trim();
            if !w.is_empty() && !w.starts_with('#') {
                lex.literals.insert(fold(w));
            }
        }
        Ok(lex)
    }

    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        literals: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut lex = TagLexicon::default();
        for (w, t) in pairs {
            lex.tags.entry(fold(w)).or_insert_with(|| PosTag::new(t));
        }
        lex.literals.extend(literals.into_iter().map(fold));
        lex
    }

    pub fn tag_of(&self, word: &str) -> Option<PosTag> {
        let w = fold(word);
        if self.literals.contains(&w) {
            return Some(PosTag::new(&w.to_uppercase()));
        }
        self.tags.get(&w).cloned()
    }

    /// Every tag this lexicon can emit.
    pub fn inventory(&self) -> BTreeSet<PosTag> {
        self.tags
            .values()
            .cloned()
            .chain(self.literals.iter().map(|l| PosTag::new(&l.to_uppercase())))
            .collect()
    }
}

/// Tags a word sequence, failing on the first word the lexicon cannot resolve.
pub fn tag_words<S: AsRef<str>>(lexicon: &TagLexicon, words: &[S]) -> Result<Vec<PosTag>, TemplateError> {
    words
        .iter()
        .map(|w| {
            lexicon
                .tag_of(w.as_ref())
                .ok_or_else(|| TemplateError::Untaggable(w.as_ref().to_string()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedWord {
    pub word: String,
    pub tag: PosTag,
}

/// One limerick of the tagged corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub lines: Vec<Vec<TaggedWord>>,
}

/// Reads one JSON record per line.
pub fn read_corpus<R: BufRead>(source: R) -> Result<Vec<CorpusRecord>, TemplateError> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line.map_err(|source| TemplateError::Read {
            what: "corpus",
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| TemplateError::BadCorpusLine {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineTemplate {
    pub id: String,
    pub line_idx: usize,
    pub tags: Vec<PosTag>,
    pub source_id: String,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<PosTag, usize>,
    terminal: Option<usize>,
}

/// Prefix trie over the templates of one line position.
#[derive(Clone, Debug)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn new() -> Self {
        Trie {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, tags: &[PosTag], template: usize) {
        let mut node = 0;
        for t in tags {
            node = match self.nodes[node].children.get(t) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(t.clone(), n);
                    n
                }
            };
        }
        self.nodes[node].terminal.get_or_insert(template);
    }

    fn walk(&self, tags: &[PosTag]) -> Option<usize> {
        tags.iter()
            .try_fold(0, |node, t| self.nodes[node].children.get(t).copied())
    }
}

/// Handle to a trie node; only meaningful for the bank and line it came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrefixNode(usize);

#[derive(Clone, Debug)]
struct LineBank {
    templates: Vec<LineTemplate>,
    trie: Trie,
}

impl LineBank {
    fn new() -> Self {
        LineBank {
            templates: Vec::new(),
            trie: Trie::new(),
        }
    }

    fn push(&mut self, t: LineTemplate) {
        self.trie.insert(&t.tags, self.templates.len());
        self.templates.push(t);
    }
}

/// Deduplicated templates per line position, each with a prefix index.
#[derive(Clone, Debug)]
pub struct TemplateBank {
    lines: BTreeMap<usize, LineBank>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ExtractReport {
    pub records: usize,
    /// Distinct templates per line index.
    pub templates_per_line: BTreeMap<usize, usize>,
    pub duplicates_collapsed: usize,
}

/// Builds the bank from tagged records. Records must have exactly five lines.
pub fn extract_templates(
    corpus: &[CorpusRecord],
) -> Result<(TemplateBank, ExtractReport), TemplateError> {
    let mut bank = TemplateBank::empty();
    let mut report = ExtractReport {
        records: corpus.len(),
        ..Default::default()
    };
    for rec in corpus {
        if rec.lines.len() != 5 {
            return Err(TemplateError::BadRecord {
                id: rec.id.clone(),
                reason: format!("expected 5 lines, found {}", rec.lines.len()),
            });
        }
        for line_idx in TEMPLATE_LINES {
            let tags: Vec<PosTag> = rec.lines[line_idx - 1].iter().map(|w| w.tag.clone()).collect();
            if tags.is_empty() {
                return Err(TemplateError::BadRecord {
                    id: rec.id.clone(),
                    reason: format!("line {line_idx} is empty"),
                });
            }
            let lb = bank.lines.entry(line_idx).or_insert_with(LineBank::new);
            if lb.trie.walk(&tags).and_then(|n| lb.trie.nodes[n].terminal).is_some() {
                report.duplicates_collapsed += 1;
                continue;
            }
            let id = format!("L{line_idx}-{:03}", lb.templates.len());
            lb.push(LineTemplate {
                id,
                line_idx,
                tags,
                source_id: rec.id.clone(),
            });
        }
    }
    if bank.lines.values().all(|l| l.templates.is_empty()) {
        return Err(TemplateError::NoTemplates);
    }
    report.templates_per_line = bank
        .lines
        .iter()
        .map(|(&k, v)| (k, v.templates.len()))
        .collect();
    Ok((bank, report))
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format_version: u32,
    templates: Vec<LineTemplate>,
}

impl TemplateBank {
    fn empty() -> Self {
        TemplateBank {
            lines: BTreeMap::new(),
        }
    }

    pub fn from_templates(templates: Vec<LineTemplate>) -> Result<Self, TemplateError> {
        let mut bank = TemplateBank::empty();
        for t in templates {
            if !TEMPLATE_LINES.contains(&t.line_idx) {
                return Err(TemplateError::LineIndex(t.line_idx));
            }
            if t.tags.is_empty() {
                return Err(TemplateError::BadBank(format!("template {} is empty", t.id)));
            }
            bank.lines
                .entry(t.line_idx)
                .or_insert_with(LineBank::new)
                .push(t);
        }
        if bank.lines.is_empty() {
            return Err(TemplateError::NoTemplates);
        }
        Ok(bank)
    }

    pub fn to_json(&self) -> String {
        let file = BankFile {
            format_version: BANK_FORMAT_VERSION,
            templates: self.lines.values().flat_map(|l| l.templates.clone()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let file: BankFile =
            serde_json::from_str(text).map_err(|e| TemplateError::BadBank(e.to_string()))?;
        if file.format_version != BANK_FORMAT_VERSION {
            return Err(TemplateError::BadBank(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        TemplateBank::from_templates(file.templates)
    }

    fn line(&self, line_idx: usize) -> Option<&LineBank> {
        self.lines.get(&line_idx)
    }

    pub fn templates(&self, line_idx: usize) -> &[LineTemplate] {
        self.line(line_idx).map(|l| l.templates.as_slice()).unwrap_or(&[])
    }

    pub fn template_by_id(&self, id: &str) -> Option<&LineTemplate> {
        self.lines
            .values()
            .flat_map(|l| l.templates.iter())
            .find(|t| t.id == id)
    }

    /// True iff some template of `line_idx` starts with exactly `partial`.
    pub fn viable_prefix(&self, line_idx: usize, partial: &[PosTag]) -> bool {
        self.prefix_node(line_idx, partial).is_some()
    }

    /// The stored template equal to `tags`, if any.
    pub fn lookup(&self, line_idx: usize, tags: &[PosTag]) -> Option<&LineTemplate> {
        let lb = self.line(line_idx)?;
        let node = lb.trie.walk(tags)?;
        lb.trie.nodes[node].terminal.map(|i| &lb.templates[i])
    }

    pub fn prefix_node(&self, line_idx: usize, partial: &[PosTag]) -> Option<PrefixNode> {
        let lb = self.line(line_idx)?;
        if lb.templates.is_empty() {
            return None;
        }
        lb.trie.walk(partial).map(PrefixNode)
    }

    pub fn root(&self, line_idx: usize) -> Option<PrefixNode> {
        self.prefix_node(line_idx, &[])
    }

    pub fn child(&self, line_idx: usize, node: PrefixNode, tag: &PosTag) -> Option<PrefixNode> {
        let lb = self.line(line_idx)?;
        lb.trie.nodes[node.0].children.get(tag).copied().map(PrefixNode)
    }

    /// Template completed exactly at `node`.
    pub fn terminal(&self, line_idx: usize, node: PrefixNode) -> Option<&LineTemplate> {
        let lb = self.line(line_idx)?;
        lb.trie.nodes[node.0].terminal.map(|i| &lb.templates[i])
    }

    /// Whether some template continues past `node`.
    pub fn extends(&self, line_idx: usize, node: PrefixNode) -> bool {
        self.line(line_idx)
            .map(|lb| !lb.trie.nodes[node.0].children.is_empty())
            .unwrap_or(false)
    }

    /// Tags `X` for which `prefix + [X]` is a complete template.
    pub fn final_tags(&self, line_idx: usize, node: PrefixNode) -> Vec<PosTag> {
        let Some(lb) = self.line(line_idx) else {
            return Vec::new();
        };
        lb.trie.nodes[node.0]
            .children
            .iter()
            .filter(|(_, &c)| lb.trie.nodes[c].terminal.is_some())
            .map(|(t, _)| t.clone())
            .collect()
    }

    /// Copy of the bank where `line_idx` keeps only `template_id`.
    pub fn restricted(&self, line_idx: usize, template_id: &str) -> Option<TemplateBank> {
        let t = self
            .templates(line_idx)
            .iter()
            .find(|t| t.id == template_id)?
            .clone();
        let mut out = self.clone();
        let mut lb = LineBank::new();
        lb.push(t);
        out.lines.insert(line_idx, lb);
        Some(out)
    }

    /// Fails on the first template tag the lexicon cannot produce.
    pub fn check_inventory(&self, lexicon: &TagLexicon) -> Result<(), TemplateError> {
        let inv = lexicon.inventory();
        for t in self.lines.values().flat_map(|l| l.templates.iter()) {
            if let Some(tag) = t.tags.iter().find(|tag| !inv.contains(*tag)) {
                return Err(TemplateError::UnknownTag {
                    tag: tag.clone(),
                    template: t.id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Rarity weights of the tags seen at one line position.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PosWeights {
    pub line_idx: usize,
    weights: BTreeMap<PosTag, f64>,
}

impl PosWeights {
    /// Softmax over inverse occurrence shares.
    pub fn from_counts(line_idx: usize, counts: &BTreeMap<PosTag, usize>) -> Result<Self, TemplateError> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(TemplateError::EmptyLine(line_idx));
        }
        let inv: Vec<(PosTag, f64)> = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(t, &c)| (t.clone(), total as f64 / c as f64))
            .collect();
        let max = inv.iter().map(|(_, x)| *x).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = inv.iter().map(|(_, x)| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights = inv
            .into_iter()
            .zip(exps)
            .map(|((t, _), e)| (t, e / z))
            .collect();
        Ok(PosWeights { line_idx, weights })
    }

    pub fn get(&self, tag: &PosTag) -> Option<f64> {
        self.weights.get(tag).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PosTag, f64)> {
        self.weights.iter().map(|(t, &w)| (t, w))
    }

    /// Weighted hamming distance that also counts the overhang of the
    /// longer template, each extra position weighted by its own tag. Unknown
    /// tags weigh zero. Equals [`diversity_score`] on equal-length input.
    pub fn padded_distance(&self, t1: &[PosTag], t2: &[PosTag]) -> f64 {
        let w = |t: &PosTag| self.get(t).unwrap_or(0.0);
        let n = t1.len().max(t2.len());
        (0..n)
            .map(|i| match (t1.get(i), t2.get(i)) {
                (Some(a), Some(b)) if a == b => 0.0,
                (Some(a), Some(b)) => w(a).max(w(b)),
                (Some(a), None) | (None, Some(a)) => w(a),
                (None, None) => 0.0,
            })
            .sum()
    }
}

/// Counts every position of every stored template of the line.
pub fn compute_pos_weights(bank: &TemplateBank, line_idx: usize) -> Result<PosWeights, TemplateError> {
    if !TEMPLATE_LINES.contains(&line_idx) {
        return Err(TemplateError::LineIndex(line_idx));
    }
    let mut counts: BTreeMap<PosTag, usize> = BTreeMap::new();
    for t in bank.templates(line_idx) {
        for tag in &t.tags {
            *counts.entry(tag.clone()).or_default() += 1;
        }
    }
    PosWeights::from_counts(line_idx, &counts)
}

/// Sum over mismatching positions of the larger of the two tag weights.
pub fn diversity_score(weights: &PosWeights, t1: &[PosTag], t2: &[PosTag]) -> Result<f64, TemplateError> {
    if t1.len() != t2.len() {
        return Err(TemplateError::LengthMismatch(t1.len(), t2.len()));
    }
    let w = |t: &PosTag| weights.get(t).ok_or_else(|| TemplateError::UnweightedTag(t.clone()));
    let mut total = 0.0;
    for (a, b) in t1.iter().zip(t2) {
        if a != b {
            total += w(a)?.max(w(b)?);
        }
    }
    Ok(total)
}
