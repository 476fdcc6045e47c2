#![allow(dead_code)]

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::sync::Arc;

use limerick::generator::{Engine, ResourcePaths, Resources};
use limerick::langmodel::{train_ngram, NgramModel};
use limerick::phonetics::fold;
use limerick::templates::{extract_templates, read_corpus, TemplateBank};

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

pub fn lm_sentences() -> Vec<Vec<String>> {
    let f = File::open(toy_dir().join("lm_corpus.txt")).unwrap();
    BufReader::new(f)
        .lines()
        .map(|l| l.unwrap().split_whitespace().map(fold).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Bank extracted from the tagged corpus in this process.
pub fn fresh_bank() -> TemplateBank {
    let f = File::open(toy_dir().join("corpus.jsonl")).unwrap();
    let records = read_corpus(BufReader::new(f)).unwrap();
    assert!(records.len() >= 40, "fixture corpus has {} limericks", records.len());
    extract_templates(&records).unwrap().0
}

/// Order-2 model trained in this process with the same settings as the
/// committed lm.json.
pub fn fresh_lm() -> NgramModel {
    train_ngram(&lm_sentences(), 2, 0.01).unwrap()
}

pub fn toy_resources() -> Resources {
    let mut res = ResourcePaths::in_dir(&toy_dir()).load().unwrap();
    res.bank = fresh_bank();
    res
}

pub fn toy_engine() -> Engine {
    Engine::new(toy_resources(), Arc::new(fresh_lm())).unwrap()
}

pub fn prompts() -> Vec<String> {
    std::fs::read_to_string(toy_dir().join("prompts.txt"))
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}
