//! Pronunciation dictionary, syllable/stress lookup, meter fitting and rhyme.
//!
//! The dictionary format is the ARPAbet one used by the CMU Pronouncing
//! Dictionary:
//!
//! ```text
//! ;;; comment
//! AGAIN  AH0 G EH1 N
//! AGAIN(1)  AH0 G EY1 N
//! ```
//!
//! Vowels carry a stress digit (`0` unstressed, `1` primary, `2` secondary).
//! A syllable is a vowel phoneme, so the syllable count of a pronunciation is
//! the number of digits it carries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhoneticsError {
    #[error("failed to read pronunciation source: {0}")]
    Read(#[from] std::io::Error),
    #[error("no entries in pronunciation source")]
    NoEntries,
    #[error("word not in lexicon: {0}")]
    UnknownWord(String),
    #[error("line index {0} outside 1..=5")]
    LineIndex(usize),
    #[error("malformed rhyme override on line {line}: {text}")]
    BadOverride { line: usize, text: String },
}

const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];
const CONSONANTS: [&str; 24] = [
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P", "R", "S", "SH", "T",
    "TH", "V", "W", "Y", "Z", "ZH",
];

/// Metrical weight of one syllable as used by the meter filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stress {
    Unstressed,
    Stressed,
    /// Fits either a stressed or an unstressed slot.
    Flexible,
}

impl fmt::Display for Stress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Stress::Unstressed => 'u',
            Stress::Stressed => 's',
            Stress::Flexible => 'f',
        };
        write!(f, "{c}")
    }
}

/// One dictionary pronunciation of a word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pronunciation {
    phonemes: Vec<String>,
    /// Stress digit per vowel, in order.
    stresses: Vec<u8>,
    rhyme_tail: String,
}

impl Pronunciation {
    /// Parses whitespace separated ARPAbet symbols.
    pub fn parse<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Result<Self, String> {
        let mut phonemes = Vec::new();
        let mut stresses = Vec::new();
        for sym in symbols {
            let (base, digit) = match sym.char_indices().last() {
                Some((i, c)) if c.is_ascii_digit() => (&sym[..i], Some(c as u8 - b'0')),
                _ => (sym, None),
            };
            match digit {
                Some(d) => {
                    if !VOWELS.contains(&base) {
                        return Err(format!("stress digit on non-vowel `{sym}`"));
                    }
                    if d > 2 {
                        return Err(format!("stress digit out of range in `{sym}`"));
                    }
                    stresses.push(d);
                }
                None => {
                    if VOWELS.contains(&base) {
                        return Err(format!("vowel `{sym}` without stress digit"));
                    }
                    if !CONSONANTS.contains(&base) {
                        return Err(format!("unknown phoneme `{sym}`"));
                    }
                }
            }
            phonemes.push(sym.to_string());
        }
        if phonemes.is_empty() {
            return Err("no phonemes".into());
        }
        if stresses.is_empty() {
            return Err("no vowel".into());
        }
        let rhyme_tail = compute_rhyme_tail(&phonemes);
        Ok(Pronunciation {
            phonemes,
            stresses,
            rhyme_tail,
        })
    }

    pub fn phonemes(&self) -> &[String] {
        &self.phonemes
    }

    pub fn stresses(&self) -> &[u8] {
        &self.stresses
    }

    pub fn syllables(&self) -> usize {
        self.stresses.len()
    }

    /// Monosyllables are flexible regardless of their digit; otherwise
    /// primary is stressed, secondary flexible and zero unstressed.
    pub fn stress_pattern(&self) -> Vec<Stress> {
        if self.stresses.len() == 1 {
            return vec![Stress::Flexible];
        }
        self.stresses
            .iter()
            .map(|d| match d {
                1 => Stress::Stressed,
                2 => Stress::Flexible,
                _ => Stress::Unstressed,
            })
            .collect()
    }

    /// Phonemes from the last primary-stressed vowel onward, digits removed.
    pub fn rhyme_tail(&self) -> &str {
        &self.rhyme_tail
    }
}

fn compute_rhyme_tail(phonemes: &[String]) -> String {
    let digit = |p: &String| p.chars().last().and_then(|c| c.to_digit(10));
    // Fall back to the last secondary, then the last vowel, for words with no
    // primary stress (mostly unstressed function words).
    let start = [Some(1), Some(2), None]
        .iter()
        .find_map(|want| {
            phonemes.iter().rposition(|p| match (digit(p), want) {
                (Some(d), Some(w)) => d == *w,
                (Some(_), None) => true,
                _ => false,
            })
        })
        .unwrap_or(0);
    phonemes[start..]
        .iter()
        .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A line of the source that could not be parsed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MalformedLine {
    pub line_no: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LoadReport {
    pub words: usize,
    pub pronunciations: usize,
    pub malformed: Vec<MalformedLine>,
}

/// Case-folded word → pronunciations, plus curated rhyme overrides.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Pronunciation>>,
    rhyme_overrides: HashMap<(String, String), bool>,
}

pub fn fold(word: &str) -> String {
    word.to_lowercase()
}

/// Reads a pronunciation dictionary. Malformed lines land in the report.
pub fn load_lexicon<R: BufRead>(source: R) -> Result<(Lexicon, LoadReport), PhoneticsError> {
    let mut lexicon = Lexicon::default();
    let mut report = LoadReport::default();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(";;;") {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let head = parts.next().unwrap_or_default();
        let word = match strip_variant(head) {
            Some(w) if !w.is_empty() => fold(w),
            _ => {
                report.malformed.push(MalformedLine {
                    line_no: idx + 1,
                    text: line.clone(),
                    reason: "bad variant suffix".into(),
                });
                continue;
            }
        };
        match Pronunciation::parse(parts) {
            Ok(p) => {
                let list = lexicon.entries.entry(word).or_default();
                if !list.contains(&p) {
                    list.push(p);
                    report.pronunciations += 1;
                }
            }
            Err(reason) => report.malformed.push(MalformedLine {
                line_no: idx + 1,
                text: line.clone(),
                reason,
            }),
        }
    }
    report.words = lexicon.entries.len();
    if lexicon.entries.is_empty() {
        return Err(PhoneticsError::NoEntries);
    }
    Ok((lexicon, report))
}

/// `WORD(2)` → `WORD`; `None` when the parenthesised suffix is not a number.
fn strip_variant(head: &str) -> Option<&str> {
    match head.find('(') {
        None => Some(head),
        Some(open) => {
            let rest = head[open + 1..].strip_suffix(')')?;
            if rest.is_empty() || !rest.chars().all(|c| c.is_ascii_digit()) {
                return None;
            }
            Some(&head[..open])
        }
    }
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&fold(word))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn pronunciations(&self, word: &str) -> Result<&[Pronunciation], PhoneticsError> {
        self.entries
            .get(&fold(word))
            .map(Vec::as_slice)
            .ok_or_else(|| PhoneticsError::UnknownWord(word.to_string()))
    }

    pub fn syllable_counts(&self, word: &str) -> Result<BTreeSet<usize>, PhoneticsError> {
        Ok(self
            .pronunciations(word)?
            .iter()
            .map(Pronunciation::syllables)
            .collect())
    }

    /// Distinct stress patterns, in dictionary order.
    pub fn stress_patterns(&self, word: &str) -> Result<Vec<Vec<Stress>>, PhoneticsError> {
        let mut out: Vec<Vec<Stress>> = Vec::new();
        for p in self.pronunciations(word)? {
            let pat = p.stress_pattern();
            if !out.contains(&pat) {
                out.push(pat);
            }
        }
        Ok(out)
    }

    /// Reads `word1,word2,true|false` lines. Returns the number of overrides.
    pub fn load_rhyme_overrides<R: BufRead>(&mut self, source: R) -> Result<usize, PhoneticsError> {
        let mut n = 0;
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let verdict = match fields.as_slice() {
                [_, _, v] => v.parse::<bool>().ok(),
                _ => None,
            };
            match verdict {
                Some(v) => {
                    self.set_rhyme_override(fields[0], fields[1], v);
                    n += 1;
                }
                None => {
                    return Err(PhoneticsError::BadOverride {
                        line: idx + 1,
                        text: line,
                    })
                }
            }
        }
        Ok(n)
    }

    pub fn set_rhyme_override(&mut self, w1: &str, w2: &str, rhymes: bool) {
        self.rhyme_overrides.insert(override_key(w1, w2), rhymes);
    }

    /// True iff the words differ and some pair of pronunciations shares a
    /// rhyme tail. Overrides win over the phonetic rule.
    pub fn rhymes(&self, w1: &str, w2: &str) -> Result<bool, PhoneticsError> {
        let (a, b) = (fold(w1), fold(w2));
        if let Some(v) = self.rhyme_overrides.get(&override_key(&a, &b)) {
            return Ok(*v);
        }
        let pa = self.pronunciations(&a)?;
        let pb = self.pronunciations(&b)?;
        if a == b {
            return Ok(false);
        }
        Ok(pa
            .iter()
            .any(|x| pb.iter().any(|y| x.rhyme_tail() == y.rhyme_tail())))
    }
}

/// Precomputed rhyme relation over a fixed word set. Agrees with
/// [`Lexicon::rhymes`] on every pair of indexed words.
#[derive(Clone, Debug, Default)]
pub struct RhymeIndex {
    ids: HashMap<String, usize>,
    words: Vec<String>,
    tails: Vec<Vec<usize>>,
    by_tail: Vec<Vec<usize>>,
    overrides: HashMap<(usize, usize), bool>,
}

impl RhymeIndex {
    /// Words missing from the lexicon are skipped.
    pub fn build<S: AsRef<str>>(lexicon: &Lexicon, words: impl IntoIterator<Item = S>) -> Self {
        let mut idx = RhymeIndex::default();
        let mut tail_ids: HashMap<&str, usize> = HashMap::new();
        for w in words {
            let w = fold(w.as_ref());
            let Ok(prons) = lexicon.pronunciations(&w) else {
                continue;
            };
            if idx.ids.contains_key(&w) {
                continue;
            }
            let id = idx.words.len();
            let mut tails: Vec<usize> = prons
                .iter()
                .map(|p| {
                    let next = tail_ids.len();
                    let t = *tail_ids.entry(p.rhyme_tail()).or_insert(next);
                    if t == idx.by_tail.len() {
                        idx.by_tail.push(Vec::new());
                    }
                    t
                })
                .collect();
            tails.sort_unstable();
            tails.dedup();
            for &t in &tails {
                idx.by_tail[t].push(id);
            }
            idx.ids.insert(w.clone(), id);
            idx.words.push(w);
            idx.tails.push(tails);
        }
        for ((a, b), &v) in &lexicon.rhyme_overrides {
            if let (Some(&x), Some(&y)) = (idx.ids.get(a), idx.ids.get(b)) {
                idx.overrides.insert((x.min(y), x.max(y)), v);
            }
        }
        idx
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    fn rhymes_id(&self, x: usize, y: usize) -> bool {
        if let Some(&v) = self.overrides.get(&(x.min(y), x.max(y))) {
            return v;
        }
        x != y && self.tails[x].iter().any(|t| self.tails[y].contains(t))
    }

    /// False when either word is not indexed. Expects case-folded input.
    pub fn rhymes(&self, w1: &str, w2: &str) -> bool {
        match (self.id(w1), self.id(w2)) {
            (Some(x), Some(y)) => self.rhymes_id(x, y),
            _ => false,
        }
    }

    /// Indexed words that rhyme with `word`, in index order.
    pub fn partners(&self, word: &str) -> Vec<&str> {
        let Some(x) = self.id(word) else {
            return Vec::new();
        };
        let mut ids: Vec<usize> = self.tails[x]
            .iter()
            .flat_map(|&t| self.by_tail[t].iter().copied())
            .chain(
                self.overrides
                    .keys()
                    .filter_map(|&(a, b)| if a == x { Some(b) } else if b == x { Some(a) } else { None }),
            )
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter(|&y| self.rhymes_id(x, y))
            .map(|y| self.words[y].as_str())
            .collect()
    }
}

fn override_key(w1: &str, w2: &str) -> (String, String) {
    let (a, b) = (fold(w1), fold(w2));
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Syllable target and must-stress positions for one line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineMeter {
    pub syllables: usize,
    /// 1-based syllable positions that must be stressed.
    pub stressed: BTreeSet<usize>,
}

impl LineMeter {
    /// Whether `pattern` can occupy positions `offset+1 ..= offset+len`.
    pub fn fits(&self, offset: usize, pattern: &[Stress]) -> bool {
        if offset + pattern.len() > self.syllables {
            return false;
        }
        pattern.iter().enumerate().all(|(k, s)| {
            let must_stress = self.stressed.contains(&(offset + k + 1));
            match s {
                Stress::Flexible => true,
                Stress::Stressed => must_stress,
                Stress::Unstressed => !must_stress,
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSpec {
    lines: Vec<LineMeter>,
}

impl MeterSpec {
    /// 9-9-6-6-9 with stress on every third syllable.
    pub fn limerick() -> Self {
        let long = LineMeter {
            syllables: 9,
            stressed: [3, 6, 9].into_iter().collect(),
        };
        let short = LineMeter {
            syllables: 6,
            stressed: [3, 6].into_iter().collect(),
        };
        MeterSpec {
            lines: vec![long.clone(), long.clone(), short.clone(), short, long],
        }
    }

    pub fn new(lines: Vec<LineMeter>) -> Result<Self, String> {
        for (i, l) in lines.iter().enumerate() {
            if let Some(p) = l.stressed.iter().find(|&&p| p == 0 || p > l.syllables) {
                return Err(format!("line {}: stressed position {p} out of range", i + 1));
            }
        }
        Ok(MeterSpec { lines })
    }

    /// `line_idx` is 1-based.
    pub fn line(&self, line_idx: usize) -> Result<&LineMeter, PhoneticsError> {
        line_idx
            .checked_sub(1)
            .and_then(|i| self.lines.get(i))
            .ok_or(PhoneticsError::LineIndex(line_idx))
    }

    pub fn fits(
        &self,
        line_idx: usize,
        offset: usize,
        pattern: &[Stress],
    ) -> Result<bool, PhoneticsError> {
        Ok(self.line(line_idx)?.fits(offset, pattern))
    }
}

impl Default for MeterSpec {
    fn default() -> Self {
        MeterSpec::limerick()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Stress::*;

    fn lex(src: &str) -> Lexicon {
        load_lexicon(src.as_bytes()).unwrap().0
    }

    const SMALL: &str = "\
;;; tiny
DOG  D AO1 G
A  AH0
A(1)  EY1
MAGICIAN  M AH0 JH IH1 SH AH0 N
FIRE  F AY1 ER0
FIRE(1)  F AY1 R
RAID  R EY1 D
STAYED  S T EY1 D
PETE  P IY1 T
STREET  S T R IY1 T
MIXED  M IH1 K S T IY2 D
";

    #[test]
    fn parses_single_entry() {
        let (l, report) = load_lexicon("DOG  D AO1 G".as_bytes()).unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(l.pronunciations("dog").unwrap().len(), 1);
        assert_eq!(l.syllable_counts("DOG").unwrap(), BTreeSet::from([1]));
        assert!(report.malformed.is_empty());
    }

    #[test]
    fn empty_source_fails() {
        assert!(matches!(
            load_lexicon("".as_bytes()),
            Err(PhoneticsError::NoEntries)
        ));
        assert!(matches!(
            load_lexicon(";;; only a comment\n".as_bytes()),
            Err(PhoneticsError::NoEntries)
        ));
    }

    #[test]
    fn variants_group_under_one_word() {
        let l = lex("A  AH0\nA(1)  EY1\n");
        assert_eq!(l.pronunciations("a").unwrap().len(), 2);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let (l, report) =
            load_lexicon("DOG  D AO1 G\nCAT  K XX1 T\nBAD(x)  B AE1 D\nNOV  N\n".as_bytes()).unwrap();
        assert_eq!(l.len(), 1);
        let lines: Vec<usize> = report.malformed.iter().map(|m| m.line_no).collect();
        assert_eq!(lines, vec![2, 3, 4]);
    }

    #[test]
    fn syllables_and_stress() {
        let l = lex(SMALL);
        assert_eq!(l.syllable_counts("magician").unwrap(), BTreeSet::from([3]));
        assert_eq!(l.syllable_counts("fire").unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(
            l.stress_patterns("magician").unwrap(),
            vec![vec![Unstressed, Stressed, Unstressed]]
        );
        assert_eq!(l.stress_patterns("dog").unwrap(), vec![vec![Flexible]]);
        assert_eq!(
            l.stress_patterns("mixed").unwrap(),
            vec![vec![Stressed, Flexible]]
        );
        assert!(matches!(
            l.syllable_counts("zebra"),
            Err(PhoneticsError::UnknownWord(_))
        ));
        assert!(l.stress_patterns("zebra").is_err());
    }

    #[test]
    fn meter_examples() {
        let m = MeterSpec::limerick();
        assert!(!m.fits(3, 5, &[Unstressed]).unwrap());
        assert!(m.fits(3, 5, &[Flexible]).unwrap());
        assert!(!m.fits(2, 8, &[Stressed, Unstressed]).unwrap());
        assert!(matches!(m.fits(6, 0, &[Flexible]), Err(PhoneticsError::LineIndex(6))));
        assert!(matches!(m.fits(0, 0, &[Flexible]), Err(PhoneticsError::LineIndex(0))));
    }

    #[test]
    fn full_canonical_line_fits() {
        let m = MeterSpec::limerick();
        for idx in 1..=5 {
            let line = m.line(idx).unwrap();
            let pat: Vec<Stress> = (1..=line.syllables)
                .map(|p| if line.stressed.contains(&p) { Stressed } else { Unstressed })
                .collect();
            assert!(m.fits(idx, 0, &pat).unwrap(), "line {idx}");
        }
    }

    #[test]
    fn rhyme_examples() {
        let l = lex(SMALL);
        assert!(l.rhymes("raid", "stayed").unwrap());
        assert!(l.rhymes("Pete", "street").unwrap());
        assert!(!l.rhymes("dog", "dog").unwrap());
        assert!(!l.rhymes("dog", "raid").unwrap());
        assert!(l.rhymes("dog", "zebra").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut l = lex(SMALL);
        let n = l
            .load_rhyme_overrides("dog,raid,true\n# note\nstreet,PETE,false\n".as_bytes())
            .unwrap();
        assert_eq!(n, 2);
        assert!(l.rhymes("raid", "dog").unwrap());
        assert!(!l.rhymes("pete", "street").unwrap());
        assert!(l.load_rhyme_overrides("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn rhyme_index_matches_pairwise_rule() {
        let mut l = lex("PETE  P IY1 T\nSTREET  S T R IY1 T\nATHLETE  AE1 TH L IY2 T\nCARRY  K AE1 R IY0\nCARRY(1)  K EH1 R IY0\nSCARY  S K EH1 R IY0\nDOG  D AO1 G\n");
        l.set_rhyme_override("pete", "athlete", true);
        l.set_rhyme_override("street", "pete", false);
        let words = ["pete", "street", "athlete", "carry", "scary", "dog", "nonword"];
        let idx = RhymeIndex::build(&l, words);
        assert!(!idx.contains("nonword"));
        for a in &words[..6] {
            for b in &words[..6] {
                assert_eq!(idx.rhymes(a, b), l.rhymes(a, b).unwrap(), "{a} {b}");
            }
            let mut expected: Vec<&str> = words[..6].iter().copied().filter(|b| l.rhymes(a, b).unwrap()).collect();
            expected.sort_by_key(|w| words.iter().position(|x| x == w));
            assert_eq!(idx.partners(a), expected);
        }
    }

    #[test]
    fn rhyme_tail_without_primary_stress() {
        let p = Pronunciation::parse(["DH", "AH0"]).unwrap();
        assert_eq!(p.rhyme_tail(), "AH");
        let p = Pronunciation::parse(["K", "AE2", "NG", "G", "ER0", "UW1"]).unwrap();
        assert_eq!(p.rhyme_tail(), "UW");
    }

    fn arb_pron() -> impl Strategy<Value = Vec<String>> {
        let vowel = (0..VOWELS.len(), 0u8..3).prop_map(|(v, d)| format!("{}{}", VOWELS[v], d));
        let cons = (0..CONSONANTS.len()).prop_map(|c| CONSONANTS[c].to_string());
        prop::collection::vec((cons.clone(), vowel, prop::option::of(cons)), 1..4).prop_map(
            |sylls| {
                sylls
                    .into_iter()
                    .flat_map(|(a, v, b)| std::iter::once(a).chain([v]).chain(b))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn rhymes_is_symmetric(prons in prop::collection::vec(prop::collection::vec(arb_pron(), 1..3), 2..8)) {
            let mut src = String::new();
            for (i, word) in prons.iter().enumerate() {
                for (j, p) in word.iter().enumerate() {
                    let head = if j == 0 { format!("W{i}") } else { format!("W{i}({j})") };
                    src.push_str(&format!("{head}  {}\n", p.join(" ")));
                }
            }
            let l = lex(&src);
            for a in 0..prons.len() {
                for b in 0..prons.len() {
                    let (x, y) = (format!("w{a}"), format!("w{b}"));
                    prop_assert_eq!(l.rhymes(&x, &y).unwrap(), l.rhymes(&y, &x).unwrap());
                }
            }
        }

        #[test]
        fn stress_pattern_length_matches_syllables(p in arb_pron()) {
            let pron = Pronunciation::parse(p.iter().map(String::as_str)).unwrap();
            prop_assert_eq!(pron.stress_pattern().len(), pron.syllables());
        }
    }
}
