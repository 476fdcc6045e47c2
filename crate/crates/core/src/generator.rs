//! End-to-end limerick generation: first line, lines 2-5 under template and
//! meter constraints with storyline-sampled final words, then the name swap.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result as AnyResult};
use crate::langmodel::{score_line, LanguageModel, LmError, TokenDistribution, BOS};
use crate::phonetics::{fold, load_lexicon, Lexicon, LineMeter, MeterSpec, RhymeIndex};
use crate::search::{
    extend_candidates, PartialLine, SearchConfig, Selector, Vocabulary,
};
use crate::storyline::{
    sample_word_constrained, EmbeddingSpace, Given, NameLexicon, Provenance, Slot, Storyline,
    StorylineError, StorylineModel, DEFAULT_MAX_ATTEMPTS,
};
use crate::templates::{compute_pos_weights, PosTag, PosWeights, TagLexicon, TemplateBank, TemplateError, TEMPLATE_LINES};

/// Template redraws per line in single-template mode.
const SINGLE_TEMPLATE_REDRAWS: usize = 8;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("prompt `{prompt}` is unusable: {reason}")]
    BadPrompt { prompt: String, reason: String },
    #[error("first-line pattern {line}: {reason}")]
    BadPattern { line: usize, reason: String },
    #[error("no first-line patterns")]
    NoPatterns,
    #[error("no admissible first line: {0}")]
    FirstLine(String),
    #[error("generation failed at line {line}: {reason}")]
    Failed { line: usize, reason: String },
    #[error("inconsistent resources: {0}")]
    Resources(String),
    #[error(transparent)]
    LanguageModel(#[from] LmError),
    #[error(transparent)]
    Storyline(#[from] StorylineError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

type Result<T, E = GenerationError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoStory,
    SingleTemplate,
    CandidateRank,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoStory, Mode::SingleTemplate, Mode::CandidateRank];

    pub fn selector(self) -> Selector {
        match self {
            Mode::CandidateRank => Selector::CandidateRank,
            _ => Selector::Mtbs,
        }
    }

    pub fn uses_storyline(self) -> bool {
        self != Mode::NoStory
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoStory => "no_story",
            Mode::SingleTemplate => "single_template",
            Mode::CandidateRank => "candidate_rank",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "mtbs" => Ok(Mode::Full),
            "no_story" => Ok(Mode::NoStory),
            "single_template" => Ok(Mode::SingleTemplate),
            "candidate_rank" | "cr" => Ok(Mode::CandidateRank),
            other => Err(format!(
                "unknown mode `{other}` (expected full, mtbs, no-story, single-template or candidate-rank)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternToken {
    Word(String),
    Slot { tag: PosTag, syllables: usize },
    Name { syllables: usize },
}

/// Canonical first line such as `there once was a <NN:2> named <NAME:1>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstLinePattern {
    pub id: String,
    pub tokens: Vec<PatternToken>,
}

impl FirstLinePattern {
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, String> {
        let mut tokens = Vec::new();
        for tok in text.split_whitespace() {
            if let Some(inner) = tok.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
                let (tag, syl) = inner
                    .split_once(':')
                    .ok_or_else(|| format!("slot `{tok}` needs the form <TAG:syllables>"))?;
                let syllables: usize = syl
                    .parse()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| format!("slot `{tok}` has a bad syllable count"))?;
                tokens.push(if tag == "NAME" {
                    PatternToken::Name { syllables }
                } else {
                    PatternToken::Slot {
                        tag: PosTag::new(tag),
                        syllables,
                    }
                });
            } else {
                tokens.push(PatternToken::Word(fold(tok)));
            }
        }
        let names = tokens
            .iter()
            .filter(|t| matches!(t, PatternToken::Name { .. }))
            .count();
        if names != 1 || !matches!(tokens.last(), Some(PatternToken::Name { .. })) {
            return Err("pattern must end in exactly one <NAME:k> slot".into());
        }
        Ok(FirstLinePattern {
            id: id.into(),
            tokens,
        })
    }
}

pub fn parse_first_lines<R: BufRead>(source: R) -> Result<Vec<FirstLinePattern>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line.map_err(|e| GenerationError::BadPattern {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let id = format!("first-{}", out.len());
        out.push(
            FirstLinePattern::parse(id, t).map_err(|reason| GenerationError::BadPattern {
                line: idx + 1,
                reason,
            })?,
        );
    }
    if out.is_empty() {
        return Err(GenerationError::NoPatterns);
    }
    Ok(out)
}

/// Instantiated first line with a placeholder name in the last position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstLine {
    pub pattern_id: String,
    pub words: Vec<String>,
    /// Syllable offset of the name slot and the meter the line was built to.
    pub name_offset: usize,
    pub meter: LineMeter,
}

/// Meter for a first line of `syllables` syllables: stress on every third
/// syllable counting back from the last one.
pub fn first_line_meter(syllables: usize) -> LineMeter {
    LineMeter {
        syllables,
        stressed: (0..)
            .map(|k| syllables as isize - 3 * k)
            .take_while(|&p| p > 0)
            .map(|p| p as usize)
            .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePaths {
    pub lexicon: PathBuf,
    pub tags: PathBuf,
    pub literals: PathBuf,
    pub bank: PathBuf,
    pub embeddings: PathBuf,
    pub names: PathBuf,
    pub first_lines: PathBuf,
    pub rhyme_overrides: Option<PathBuf>,
}

impl ResourcePaths {
    /// Conventional file names inside one directory. The rhyme override file
    /// is used only if present.
    pub fn in_dir(dir: &Path) -> Self {
        let overrides = dir.join("rhyme_overrides.csv");
        ResourcePaths {
            lexicon: dir.join("lexicon.dict"),
            tags: dir.join("tags.tsv"),
            literals: dir.join("literals.txt"),
            bank: dir.join("bank.json"),
            embeddings: dir.join("embeddings.txt"),
            names: dir.join("names.txt"),
            first_lines: dir.join("first_lines.txt"),
            rhyme_overrides: overrides.exists().then_some(overrides),
        }
    }

    /// Every path with a label, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = vec![
            ("lexicon", &self.lexicon),
            ("tags", &self.tags),
            ("literals", &self.literals),
            ("bank", &self.bank),
            ("embeddings", &self.embeddings),
            ("names", &self.names),
            ("first_lines", &self.first_lines),
        ];
        if let Some(p) = &self.rhyme_overrides {
            v.push(("rhyme_overrides", p));
        }
        v
    }

    pub fn load(&self) -> AnyResult<Resources> {
        let open = |p: &Path| -> AnyResult<BufReader<File>> {
            File::open(p)
                .map(BufReader::new)
                .map_err(|e| Error::io(format!("opening {}", p.display()), e))
        };
        let (mut lexicon, report) = load_lexicon(open(&self.lexicon)?)?;
        if !report.malformed.is_empty() {
            log::warn!("{} malformed dictionary lines skipped", report.malformed.len());
        }
        if let Some(p) = &self.rhyme_overrides {
            lexicon.load_rhyme_overrides(open(p)?)?;
        }
        let tags = TagLexicon::load(open(&self.tags)?, open(&self.literals)?)?;
        let bank_text = std::fs::read_to_string(&self.bank)
            .map_err(|e| Error::io(format!("reading {}", self.bank.display()), e))?;
        let bank = TemplateBank::from_json(&bank_text)?;
        let (embeddings, _) = EmbeddingSpace::load(open(&self.embeddings)?)?;
        let (names, excluded) = NameLexicon::load(open(&self.names)?, &lexicon)?;
        if !excluded.is_empty() {
            log::warn!("names without pronunciation dropped: {}", excluded.join(", "));
        }
        let first_lines = parse_first_lines(open(&self.first_lines)?)?;
        Ok(Resources {
            lexicon,
            tags,
            bank,
            embeddings,
            names,
            first_lines,
            meter: MeterSpec::limerick(),
        })
    }
}

pub struct Resources {
    pub lexicon: Lexicon,
    pub tags: TagLexicon,
    pub bank: TemplateBank,
    pub embeddings: EmbeddingSpace,
    pub names: NameLexicon,
    pub first_lines: Vec<FirstLinePattern>,
    pub meter: MeterSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub mode: Mode,
    pub search: SearchConfig,
    /// Include line 1 in the poem score.
    pub score_first_line: bool,
}

impl GenerationRequest {
    pub fn new(prompt: &str, mode: Mode, search: SearchConfig) -> Self {
        GenerationRequest {
            prompt: prompt.to_string(),
            mode,
            search,
            score_first_line: false,
        }
    }
}

/// A poem in progress. Line 1 carries a placeholder name until the end.
#[derive(Clone, Debug)]
pub struct PartialPoem {
    pub first: Arc<FirstLine>,
    /// Lines 2.. generated so far.
    pub lines: Vec<Vec<Arc<str>>>,
    /// Final words y1..y5 assigned so far.
    pub finals: [Option<Arc<str>>; 5],
    pub provenance: [Provenance; 5],
    pub template_ids: Vec<String>,
    pub sum_logprob: f64,
    pub tokens: usize,
    pub attempts: usize,
}

impl PartialPoem {
    fn new(first: FirstLine) -> Self {
        PartialPoem {
            first: Arc::new(first),
            lines: Vec::new(),
            finals: Default::default(),
            provenance: [Provenance::Storyline; 5],
            template_ids: Vec::new(),
            sum_logprob: 0.0,
            tokens: 0,
            attempts: 0,
        }
    }

    /// Context for the next line: every line so far, each after a start
    /// marker, then the marker opening the next line.
    fn context(&self) -> Arc<[Arc<str>]> {
        let bos: Arc<str> = Arc::from(BOS);
        let mut ctx: Vec<Arc<str>> = vec![bos.clone()];
        ctx.extend(self.first.words.iter().map(|w| Arc::from(w.as_str())));
        for l in &self.lines {
            ctx.push(bos.clone());
            ctx.extend(l.iter().cloned());
        }
        ctx.push(bos);
        Arc::from(ctx)
    }

    fn final_word(&self, line: usize) -> Option<&str> {
        self.finals[line - 1].as_deref()
    }

    fn uses(&self, w: &str) -> bool {
        self.finals.iter().flatten().any(|f| &**f == w)
    }

    pub fn score(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.sum_logprob / self.tokens as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limerick {
    pub lines: Vec<Vec<String>>,
    pub storyline: Storyline,
    pub score: f64,
    /// Template ids of lines 2-5.
    pub template_ids: Vec<String>,
    pub first_line_pattern: String,
    pub attempts: usize,
}

impl Limerick {
    pub fn text_lines(&self) -> Vec<String> {
        self.lines.iter().map(|l| l.join(" ")).collect()
    }
}

/// One output poem as emitted by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoemRecord {
    pub prompt: String,
    pub mode: Mode,
    pub seed: u64,
    pub lines: Vec<String>,
    pub storyline: Storyline,
    pub score: f64,
    pub templates: Vec<String>,
    pub attempts: usize,
}

impl PoemRecord {
    pub fn new(poem: &Limerick, req: &GenerationRequest) -> Self {
        PoemRecord {
            prompt: fold(&req.prompt),
            mode: req.mode,
            seed: req.search.rng_seed,
            lines: poem.text_lines(),
            storyline: poem.storyline.clone(),
            score: poem.score,
            templates: poem.template_ids.clone(),
            attempts: poem.attempts,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one (seed, purpose...) coordinate.
fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5EED_u64, |h, &p| splitmix(h ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Loaded resources plus everything derived from them once.
pub struct Engine {
    res: Resources,
    model: Arc<dyn LanguageModel>,
    vocab: Vocabulary,
    weights: BTreeMap<usize, PosWeights>,
    rhyme: RhymeIndex,
    max_word_syllables: usize,
}

impl Engine {
    pub fn new(res: Resources, model: Arc<dyn LanguageModel>) -> Result<Self> {
        let vocab = match model.vocabulary() {
            Some(words) => Vocabulary::build(words.iter().map(|w| &**w), &res.lexicon, &res.tags),
            None => Vocabulary::build(res.lexicon.words(), &res.lexicon, &res.tags),
        };
        if vocab.is_empty() {
            return Err(GenerationError::Resources(
                "no word is known to the model, the dictionary and the tagger".into(),
            ));
        }
        res.bank.check_inventory(&res.tags)?;
        let mut weights = BTreeMap::new();
        for line in TEMPLATE_LINES {
            if res.bank.templates(line).is_empty() {
                return Err(GenerationError::Resources(format!("no templates for line {line}")));
            }
            weights.insert(line, compute_pos_weights(&res.bank, line)?);
        }
        let covered: HashSet<&PosTag> = vocab.words().iter().filter_map(|w| vocab.get(w)).map(|i| &i.tag).collect();
        for line in TEMPLATE_LINES {
            let usable = res.bank.templates(line).iter().any(|t| t.tags.iter().all(|g| covered.contains(g)));
            if !usable {
                return Err(GenerationError::Resources(format!(
                    "no template of line {line} is coverable by the vocabulary"
                )));
            }
        }
        let rhyme = RhymeIndex::build(
            &res.lexicon,
            vocab.words().iter().map(|w| &**w).chain(res.names.iter().map(|n| n.word.as_str())),
        );
        let max_word_syllables = vocab
            .words()
            .iter()
            .filter_map(|w| vocab.get(w))
            .flat_map(|i| i.patterns.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        Ok(Engine {
            res,
            model,
            vocab,
            weights,
            rhyme,
            max_word_syllables,
        })
    }

    pub fn resources(&self) -> &Resources {
        &self.res
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn model(&self) -> &dyn LanguageModel {
        &*self.model
    }

    pub fn pos_weights(&self, line: usize) -> Option<&PosWeights> {
        self.weights.get(&line)
    }

    /// Storyline conditionals over the engine vocabulary.
    pub fn storyline_model(&self) -> StorylineModel<'_> {
        StorylineModel::new(
            &self.res.lexicon,
            &self.res.embeddings,
            &self.res.names,
            self.vocab.words().iter().map(|w| &**w),
        )
    }

    fn check_request(&self, req: &GenerationRequest) -> Result<String> {
        req.search.validate().map_err(GenerationError::InvalidRequest)?;
        let prompt = fold(req.prompt.trim());
        let bad = |reason: &str| GenerationError::BadPrompt {
            prompt: prompt.clone(),
            reason: reason.into(),
        };
        if prompt.is_empty() || prompt.contains(char::is_whitespace) {
            return Err(bad("expected a single word"));
        }
        if !self.res.embeddings.contains(&prompt) {
            return Err(bad("no embedding"));
        }
        if !self.vocab.contains(&prompt) {
            return Err(bad("not in the engine vocabulary"));
        }
        Ok(prompt)
    }

    /// Fills one first-line pattern, trying patterns in random order.
    pub fn make_first_line(&self, seed: u64) -> Result<FirstLine> {
        let mut rng = rng_for(&[seed, 1, 0]);
        let mut order: Vec<&FirstLinePattern> = self.res.first_lines.iter().collect();
        if order.is_empty() {
            return Err(GenerationError::NoPatterns);
        }
        let mut last_err = String::new();
        while !order.is_empty() {
            let k = rng.random_range(0..order.len());
            let pattern = order.remove(k);
            match self.fill_pattern(pattern, &mut rng) {
                Ok(line) => return Ok(line),
                Err(e) => last_err = format!("{}: {e}", pattern.id),
            }
        }
        Err(GenerationError::FirstLine(last_err))
    }

    fn fill_pattern(&self, pattern: &FirstLinePattern, rng: &mut ChaCha8Rng) -> Result<FirstLine, String> {
        let lex = &self.res.lexicon;
        let mut total = 0;
        for tok in &pattern.tokens {
            total += match tok {
                PatternToken::Word(w) => lex
                    .pronunciations(w)
                    .map_err(|_| format!("`{w}` is not in the dictionary"))?[0]
                    .syllables(),
                PatternToken::Slot { syllables, .. } | PatternToken::Name { syllables } => *syllables,
            };
        }
        let meter = first_line_meter(total);
        let mut words: Vec<String> = Vec::new();
        let mut offset = 0;
        for tok in &pattern.tokens {
            match tok {
                PatternToken::Word(w) => {
                    offset += lex.pronunciations(w).expect("checked above")[0].syllables();
                    words.push(w.clone());
                }
                PatternToken::Slot { tag, syllables } => {
                    let mut ctx: Vec<&str> = vec![BOS];
                    ctx.extend(words.iter().map(String::as_str));
                    let dist = self.model.next_distribution(&ctx).map_err(|e| e.to_string())?;
                    let ok = dist.retain(|w| {
                        self.vocab.get(w).is_some_and(|i| {
                            &i.tag == tag
                                && i.patterns
                                    .iter()
                                    .any(|p| p.len() == *syllables && meter.fits(offset, p))
                        })
                    });
                    let (w, _) = sample_word_constrained(&ok, |_| true, 1, Slot::Y1, rng)
                        .map_err(|_| format!("no word for <{tag}:{syllables}>"))?;
                    words.push(w);
                    offset += syllables;
                }
                PatternToken::Name { syllables } => {
                    let fitting: Vec<&str> = self
                        .res
                        .names
                        .iter()
                        .map(|n| n.word.as_str())
                        .filter(|n| name_fits(lex, n, *syllables, &meter, offset))
                        .collect();
                    let name = fitting
                        .choose(rng)
                        .ok_or_else(|| format!("no name of {syllables} syllables fits"))?;
                    words.push(name.to_string());
                    return Ok(FirstLine {
                        pattern_id: pattern.id.clone(),
                        words,
                        name_offset: offset,
                        meter,
                    });
                }
            }
        }
        unreachable!("patterns end in a name slot")
    }

    /// Runs one request and returns every completed poem, best first.
    pub fn generate(&self, req: &GenerationRequest) -> Result<Vec<Limerick>> {
        let prompt = self.check_request(req)?;
        let seed = req.search.rng_seed;
        let story = self.storyline_model();
        let first = self.make_first_line(seed)?;
        let mut poems = vec![PartialPoem::new(first)];
        for line in TEMPLATE_LINES {
            poems = if req.mode == Mode::SingleTemplate {
                self.single_template_line(&poems, line, req, &prompt, &story)?
            } else {
                self.generate_line(&poems, line, req, &prompt, &story, &self.res.bank)?
            };
            if poems.is_empty() {
                return Err(GenerationError::Failed {
                    line,
                    reason: "every beam entry was pruned".into(),
                });
            }
        }
        let mut out = Vec::new();
        for (i, poem) in poems.iter().enumerate() {
            if let Some(l) = self.finish(poem, &prompt, &story, req, i)? {
                out.push(l);
            }
        }
        if out.is_empty() {
            return Err(GenerationError::Failed {
                line: 1,
                reason: "no name rhymes with the surviving storylines".into(),
            });
        }
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.lines.cmp(&b.lines))
        });
        Ok(out)
    }

    pub fn generate_records(&self, req: &GenerationRequest) -> Result<Vec<PoemRecord>> {
        Ok(self
            .generate(req)?
            .iter()
            .map(|p| PoemRecord::new(p, req))
            .collect())
    }

    fn single_template_line(
        &self,
        poems: &[PartialPoem],
        line: usize,
        req: &GenerationRequest,
        prompt: &str,
        story: &StorylineModel,
    ) -> Result<Vec<PartialPoem>> {
        let templates = self.res.bank.templates(line);
        let mut rng = rng_for(&[req.search.rng_seed, line as u64, 0x7E]);
        for _ in 0..SINGLE_TEMPLATE_REDRAWS {
            let t = templates.choose(&mut rng).expect("bank has templates for every line");
            let bank = self.res.bank.restricted(line, &t.id).expect("template from this bank");
            let out = self.generate_line(poems, line, req, prompt, story, &bank)?;
            if !out.is_empty() {
                return Ok(out);
            }
            log::debug!("line {line}: template {} produced nothing, redrawing", t.id);
        }
        Ok(Vec::new())
    }

    /// Extends every poem by line `line`. Returns up to N poems; an empty
    /// result means every branch died.
    pub fn generate_line(
        &self,
        poems: &[PartialPoem],
        line: usize,
        req: &GenerationRequest,
        prompt: &str,
        story: &StorylineModel,
        bank: &TemplateBank,
    ) -> Result<Vec<PartialPoem>> {
        let cfg = &req.search;
        let selector = req.mode.selector();
        let weights = if std::ptr::eq(bank, &self.res.bank) {
            self.weights[&line].clone()
        } else {
            compute_pos_weights(bank, line)?
        };
        let meter = self.res.meter.line(line).expect("limerick meter covers lines 1-5");
        let slot = Slot::for_line(line).expect("line in 2..=5");

        let conditionals = if req.mode.uses_storyline() {
            self.conditionals(poems, slot, prompt, story)?
        } else {
            HashMap::new()
        };

        let mut entries: Vec<PartialLine> = poems
            .iter()
            .enumerate()
            .filter_map(|(i, p)| PartialLine::start(bank, line, i, p.context()))
            .collect();
        let mut pool: Vec<PartialLine> = Vec::new();
        let reject_all = |_: &PartialLine| false;
        let no_story = |l: &PartialLine| self.no_story_final_ok(&poems[l.origin], l);
        let accept: &(dyn Fn(&PartialLine) -> bool + Sync) =
            if req.mode.uses_storyline() { &reject_all } else { &no_story };

        for step in 0..cfg.max_line_tokens {
            if entries.is_empty() {
                break;
            }
            if req.mode.uses_storyline() {
                let finished: Vec<Option<PartialLine>> = entries
                    .par_iter()
                    .enumerate()
                    .map(|(k, e)| {
                        let poem = &poems[e.origin];
                        let Some(dist) = conditionals.get(&conditional_key(slot, poem)) else {
                            return Ok(None);
                        };
                        let mut rng = rng_for(&[cfg.rng_seed, line as u64, step as u64, k as u64]);
                        self.complete_from_storyline(e, poem, slot, dist, bank, meter, story, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                pool.extend(finished.into_iter().flatten());
            }
            let ext = extend_candidates(&entries, &*self.model, bank, &self.res.meter, &self.vocab, accept)?;
            pool.extend(ext.completed);
            entries = selector.select(ext.partials, &weights, cfg);
        }

        let chosen = selector.select(pool, &weights, cfg);
        let provenance = if req.mode.uses_storyline() {
            Provenance::Storyline
        } else {
            Provenance::LanguageModel
        };
        Ok(chosen
            .into_iter()
            .map(|l| {
                let mut p = poems[l.origin].clone();
                let template = bank.lookup(line, &l.tags).expect("completed lines end on a template");
                p.finals[line - 1] = l.words.last().cloned();
                p.provenance[line - 1] = provenance;
                p.template_ids.push(template.id.clone());
                p.sum_logprob += l.sum_logprob;
                p.tokens += l.len();
                p.attempts += l.attempts;
                p.lines.push(l.words);
                p
            })
            .collect())
    }

    /// Storyline conditional for `slot`, one per distinct conditioning set.
    fn conditionals(
        &self,
        poems: &[PartialPoem],
        slot: Slot,
        prompt: &str,
        story: &StorylineModel,
    ) -> Result<HashMap<ConditionalKey, TokenDistribution>> {
        let mut out = HashMap::new();
        for p in poems {
            let key = conditional_key(slot, p);
            if out.contains_key(&key) {
                continue;
            }
            let given = Given {
                y0: prompt,
                y2: p.final_word(2),
                y3: p.final_word(3),
                y5: p.final_word(5),
            };
            match story.conditional(slot, &given) {
                Ok(d) => {
                    out.insert(key, d);
                }
                Err(StorylineError::EmptySupport(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn complete_from_storyline(
        &self,
        entry: &PartialLine,
        poem: &PartialPoem,
        slot: Slot,
        dist: &TokenDistribution,
        bank: &TemplateBank,
        meter: &LineMeter,
        story: &StorylineModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<PartialLine>> {
        let remaining = meter.syllables - entry.syllables_used;
        if remaining == 0 || remaining > self.max_word_syllables {
            return Ok(None);
        }
        let finals = bank.final_tags(entry.line_idx, entry.node());
        if finals.is_empty() {
            return Ok(None);
        }
        let y2 = poem.final_word(2);
        let accept = |w: &str| {
            let Some(info) = self.vocab.get(w) else {
                return false;
            };
            finals.contains(&info.tag)
                && self.vocab.fit_final(w, meter, entry.syllables_used).is_some()
                && !poem.uses(w)
                && match slot {
                    Slot::Y2 => story.viable_y2(w),
                    Slot::Y3 => story.viable_y3(w),
                    Slot::Y5 => y2.is_some_and(|y2| story.viable_y5(w, y2)),
                    _ => true,
                }
        };
        let (word, attempts) = match sample_word_constrained(dist, accept, DEFAULT_MAX_ATTEMPTS, slot, rng) {
            Ok(x) => x,
            Err(StorylineError::Exhausted { .. }) | Err(StorylineError::EmptySupport(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let p = self.model.next_distribution(&entry.lm_context())?.prob(&word);
        if p <= 0.0 {
            return Ok(None);
        }
        let info = self.vocab.get(&word).expect("accepted words are in the vocabulary");
        let node = bank
            .child(entry.line_idx, entry.node(), &info.tag)
            .expect("final tag continues the prefix");
        let (pron, syl) = self
            .vocab
            .fit_final(&word, meter, entry.syllables_used)
            .expect("accepted words fit");
        let mut done = entry.extended(Arc::from(word.as_str()), info.tag.clone(), node, pron, syl, p.ln());
        done.attempts = attempts;
        Ok(Some(done))
    }

    /// Final-word rule without a storyline: rhyme with the earlier finals
    /// the scheme requires, and keep a rhyming name available.
    fn no_story_final_ok(&self, poem: &PartialPoem, l: &PartialLine) -> bool {
        let w = &**l.words.last().expect("completed lines are nonempty");
        if poem.uses(w) {
            return false;
        }
        let r = |a: &str, b: &str| self.rhyme.rhymes(a, b);
        let name_for = |a: &str, b: &str| self.res.names.iter().any(|n| r(&n.word, a) && r(&n.word, b));
        match l.line_idx {
            2 => self
                .rhyme
                .partners(w)
                .iter()
                .any(|v| self.vocab.contains(v) && name_for(w, v)),
            3 => self.rhyme.partners(w).iter().any(|v| self.vocab.contains(v)),
            4 => poem.final_word(3).is_some_and(|y3| r(w, y3)),
            5 => poem
                .final_word(2)
                .is_some_and(|y2| r(w, y2) && name_for(w, y2)),
            _ => false,
        }
    }

    /// Samples y1, swaps it in for the placeholder and scores the poem.
    fn finish(
        &self,
        poem: &PartialPoem,
        prompt: &str,
        story: &StorylineModel,
        req: &GenerationRequest,
        index: usize,
    ) -> Result<Option<Limerick>> {
        let (Some(y2), Some(y5)) = (poem.final_word(2), poem.final_word(5)) else {
            return Ok(None);
        };
        let dist = match story.conditional(
            Slot::Y1,
            &Given {
                y0: prompt,
                y5: Some(y5),
                ..Default::default()
            },
        ) {
            Ok(d) => d,
            Err(StorylineError::EmptySupport(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let first = &poem.first;
        let slot_syllables = first.meter.syllables - first.name_offset;
        let accept = |w: &str| {
            self.rhyme.rhymes(w, y2)
                && !poem.uses(w)
                && name_fits(&self.res.lexicon, w, slot_syllables, &first.meter, first.name_offset)
        };
        let mut rng = rng_for(&[req.search.rng_seed, 1, 1, index as u64]);
        let (y1, attempts) = match sample_word_constrained(&dist, accept, DEFAULT_MAX_ATTEMPTS, Slot::Y1, &mut rng) {
            Ok(x) => x,
            Err(StorylineError::Exhausted { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut line1 = first.words.clone();
        *line1.last_mut().expect("first line ends in a name") = y1.clone();
        let (mut sum, mut tokens) = (poem.sum_logprob, poem.tokens);
        if req.score_first_line {
            let s = score_line(&*self.model, &line1, &[BOS.to_string()])?;
            sum += s * line1.len() as f64;
            tokens += line1.len();
        }
        let mut lines = vec![line1];
        lines.extend(poem.lines.iter().map(|l| l.iter().map(|w| w.to_string()).collect()));
        let f = |i: usize| poem.final_word(i).expect("all lines complete").to_string();
        let mut provenance = poem.provenance;
        provenance[0] = Provenance::Storyline;
        Ok(Some(Limerick {
            lines,
            storyline: Storyline {
                y0: prompt.to_string(),
                y1,
                y2: f(2),
                y3: f(3),
                y4: f(4),
                y5: f(5),
                provenance,
            },
            score: if tokens == 0 { 0.0 } else { sum / tokens as f64 },
            template_ids: poem.template_ids.clone(),
            first_line_pattern: first.pattern_id.clone(),
            attempts: poem.attempts + attempts,
        }))
    }
}

/// Earlier storyline words a conditional depends on.
type ConditionalKey = (Option<Arc<str>>, Option<Arc<str>>);

fn conditional_key(slot: Slot, poem: &PartialPoem) -> ConditionalKey {
    match slot {
        Slot::Y4 | Slot::Y5 => (poem.finals[1].clone(), poem.finals[2].clone()),
        _ => (None, None),
    }
}

/// Whether some pronunciation of `name` has `syllables` syllables and fits
/// `meter` at `offset`.
fn name_fits(lexicon: &Lexicon, name: &str, syllables: usize, meter: &LineMeter, offset: usize) -> bool {
    lexicon.stress_patterns(name).is_ok_and(|ps| {
        ps.iter()
            .any(|p| p.len() == syllables && meter.fits(offset, p))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonetics::Stress;

    #[test]
    fn pattern_parsing() {
        let p = FirstLinePattern::parse("p", "There was a <JJ:1> <NN:2> named <NAME:1>").unwrap();
        assert_eq!(p.tokens.len(), 7);
        assert_eq!(p.tokens[0], PatternToken::Word("there".into()));
        assert_eq!(p.tokens[3], PatternToken::Slot { tag: PosTag::new("JJ"), syllables: 1 });
        assert!(FirstLinePattern::parse("p", "there was a man").is_err());
        assert!(FirstLinePattern::parse("p", "<NAME:1> was a <NAME:1>").is_err());
        assert!(FirstLinePattern::parse("p", "a <NN> named <NAME:1>").is_err());
        assert!(matches!(parse_first_lines("# only a comment\n".as_bytes()), Err(GenerationError::NoPatterns)));
        assert_eq!(parse_first_lines("# c\na <NAME:1>\nb <NAME:2>\n".as_bytes()).unwrap()[1].id, "first-1");
    }

    #[test]
    fn first_line_meter_counts_back_from_the_end() {
        let m = first_line_meter(8);
        assert_eq!(m.stressed.iter().copied().collect::<Vec<_>>(), vec![2, 5, 8]);
        assert!(m.fits(4, &[Stress::Stressed, Stress::Unstressed]));
        assert_eq!(first_line_meter(9).stressed.iter().copied().collect::<Vec<_>>(), vec![3, 6, 9]);
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("mtbs".parse::<Mode>().unwrap(), Mode::Full);
        assert_eq!("no-story".parse::<Mode>().unwrap(), Mode::NoStory);
        assert_eq!("candidate-rank".parse::<Mode>().unwrap(), Mode::CandidateRank);
        assert!("beam".parse::<Mode>().is_err());
        assert_eq!(serde_json::to_string(&Mode::SingleTemplate).unwrap(), "\"single_template\"");
    }

    #[test]
    fn rng_coordinates_are_independent() {
        let a: u64 = rng_for(&[1, 2, 3]).random();
        let b: u64 = rng_for(&[1, 2, 4]).random();
        let c: u64 = rng_for(&[1, 2, 3]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
