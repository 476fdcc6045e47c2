//! Command-line surface. `run_cli` is the whole program minus process
//! setup so tests can drive it with in-memory streams.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{compare_runs, comparison_csv, Validator, SAMPLE_SIZE};
use crate::generator::{Engine, GenerationError, GenerationRequest, Mode, PoemRecord, ResourcePaths};
use crate::langmodel::{train_ngram, LanguageModel, LmError, NgramModel, RemoteEndpointConfig, RemoteModel, BOS};
use crate::phonetics::fold;
use crate::search::SearchConfig;
use crate::storyline::{sample_storyline, StorylineError, DEFAULT_MAX_ATTEMPTS};
use crate::templates::{extract_templates, read_corpus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "limerick", version, about = "Constrained limerick generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a template bank from a tagged corpus.
    ExtractTemplates {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an add-alpha n-gram model on one sentence per line.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate limericks for one prompt.
    Generate {
        #[command(flatten)]
        res: ResourceArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "full")]
        mode: Mode,
        /// Emit every completed poem instead of the best one.
        #[arg(long)]
        all: bool,
        /// Count line 1 in the poem score.
        #[arg(long)]
        score_first_line: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Sample storylines (y0..y5) for a prompt.
    Storyline {
        #[command(flatten)]
        res: ResourceArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Check poem records against the hard constraints.
    Validate {
        #[command(flatten)]
        res: ResourceArgs,
        /// JSON-lines poem records.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the diversity of several modes over a prompt list.
    Compare {
        #[command(flatten)]
        res: ResourceArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, value_delimiter = ',', default_value = "mtbs,candidate-rank")]
        modes: Vec<Mode>,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        n: Vec<usize>,
        /// Generation seeds run for every prompt.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Seed of the last-line sampler.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, default_value_t = SAMPLE_SIZE)]
        sample_size: usize,
        /// One row group per prompt instead of one per mode.
        #[arg(long)]
        per_prompt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Ask a remote model for one distribution and report what came back.
    ServeCheck {
        #[arg(long)]
        lm: String,
    },
    /// Re-run the command recorded in a manifest after checking its inputs.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ResourceArgs {
    /// Directory holding the default resource file names.
    #[arg(long)]
    pub resources: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub tags: Option<PathBuf>,
    #[arg(long)]
    pub literals: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub first_lines: Option<PathBuf>,
    #[arg(long)]
    pub rhyme_overrides: Option<PathBuf>,
    /// `ngram:<path>` or `remote:<url>`. Defaults to lm.json in --resources.
    #[arg(long)]
    pub lm: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 360)]
    pub beam: usize,
    #[arg(long, default_value_t = 12)]
    pub per_template: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub max_line_tokens: usize,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            per_template: self.per_template,
            rng_seed: self.seed,
            max_line_tokens: self.max_line_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LmSpec {
    Ngram(PathBuf),
    Remote(String),
}

impl LmSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("ngram:") {
            Ok(LmSpec::Ngram(PathBuf::from(p)))
        } else if let Some(u) = s.strip_prefix("remote:") {
            Ok(LmSpec::Remote(u.to_string()))
        } else {
            Err(Error::Config(format!("--lm expects ngram:<path> or remote:<url>, got `{s}`")))
        }
    }

    pub fn load(&self) -> Result<Arc<dyn LanguageModel>> {
        Ok(match self {
            LmSpec::Ngram(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                Arc::new(NgramModel::from_json(&text)?)
            }
            LmSpec::Remote(url) => Arc::new(RemoteModel::new(RemoteEndpointConfig::new(url.clone()))?),
        })
    }
}

impl ResourceArgs {
    pub fn paths(&self) -> Result<ResourcePaths> {
        let base = match &self.resources {
            Some(dir) => ResourcePaths::in_dir(dir),
            None => ResourcePaths::default(),
        };
        let pick = |flag: &Option<PathBuf>, default: PathBuf, name: &str| -> Result<PathBuf> {
            match flag {
                Some(p) => Ok(p.clone()),
                None if !default.as_os_str().is_empty() => Ok(default),
                None => Err(Error::Config(format!("--{name} is required without --resources"))),
            }
        };
        Ok(ResourcePaths {
            lexicon: pick(&self.lexicon, base.lexicon, "lexicon")?,
            tags: pick(&self.tags, base.tags, "tags")?,
            literals: pick(&self.literals, base.literals, "literals")?,
            bank: pick(&self.bank, base.bank, "bank")?,
            embeddings: pick(&self.embeddings, base.embeddings, "embeddings")?,
            names: pick(&self.names, base.names, "names")?,
            first_lines: pick(&self.first_lines, base.first_lines, "first-lines")?,
            rhyme_overrides: self.rhyme_overrides.clone().or(base.rhyme_overrides),
        })
    }

    pub fn lm_spec(&self) -> Result<LmSpec> {
        match (&self.lm, &self.resources) {
            (Some(s), _) => LmSpec::parse(s),
            (None, Some(dir)) => Ok(LmSpec::Ngram(dir.join("lm.json"))),
            (None, None) => Err(Error::Config("--lm is required without --resources".into())),
        }
    }

    pub fn engine(&self) -> Result<Engine> {
        let res = self.paths()?.load()?;
        let model = self.lm_spec()?.load()?;
        Ok(Engine::new(res, model)?)
    }

    /// Resource and model files with their digests.
    fn fingerprint(&self) -> Result<Vec<ResourceDigest>> {
        let paths = self.paths()?;
        let mut out: Vec<ResourceDigest> = paths
            .entries()
            .into_iter()
            .map(|(label, p)| ResourceDigest::of(label, p))
            .collect::<Result<_>>()?;
        if let LmSpec::Ngram(p) = self.lm_spec()? {
            out.push(ResourceDigest::of("lm", &p)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDigest {
    pub label: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl ResourceDigest {
    fn of(label: &str, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let digest = Sha256::digest(&bytes);
        Ok(ResourceDigest {
            label: label.to_string(),
            path: path.to_path_buf(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }
}

/// What a run read and how it was invoked; enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Arguments after the program name, without `--manifest`.
    pub argv: Vec<String>,
    /// Relative paths in `argv` resolve against this directory.
    pub working_dir: PathBuf,
    pub resources: Vec<ResourceDigest>,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn strip_manifest_flag(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--manifest" {
            skip = true;
        } else if !a.starts_with("--manifest=") {
            out.push(a.clone());
        }
    }
    out
}

/// Writes to `--out` when given, otherwise to stdout.
fn emit(out: &Option<PathBuf>, stdout: &mut dyn Write, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("writing stdout", e)),
    }
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("records serialize");
    s.push('\n');
    s
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

/// Exit status for an error: domain failures are 1, bad input is 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Generation(GenerationError::InvalidRequest(_) | GenerationError::BadPrompt { .. }) => EXIT_USAGE,
        Error::Generation(_) | Error::Evaluation(_) | Error::LanguageModel(LmError::Backend(_)) => EXIT_FAILURE,
        Error::Storyline(StorylineError::Exhausted { .. }) => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

/// Parses `argv` (including the program name) and runs it.
pub fn run_cli<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).cloned().collect();
    match execute(cli.command, &args, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_manifest(
    path: &Option<PathBuf>,
    args: &[String],
    res: Option<&ResourceArgs>,
    seeds: Vec<u64>,
    config: serde_json::Value,
    started: u128,
) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        argv: strip_manifest_flag(args),
        working_dir: std::env::current_dir().map_err(|e| Error::io("reading the working directory", e))?,
        resources: match res {
            Some(r) => r.fingerprint()?,
            None => Vec::new(),
        },
        seeds,
        config,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn execute(cmd: Command, args: &[String], stdout: &mut dyn Write) -> Result<i32> {
    let started = now_ms();
    match cmd {
        Command::ExtractTemplates { corpus, out } => {
            let f = fs::File::open(&corpus).map_err(|e| Error::io(format!("opening {}", corpus.display()), e))?;
            let records = read_corpus(BufReader::new(f))?;
            let (bank, report) = extract_templates(&records)?;
            fs::write(&out, bank.to_json()).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
            emit(&None, stdout, &to_json_line(&report))?;
            Ok(EXIT_OK)
        }
        Command::TrainLm { corpus, order, alpha, out } => {
            let sentences: Vec<Vec<String>> = read_lines(&corpus)?
                .iter()
                .map(|l| l.split_whitespace().map(fold).collect())
                .collect();
            let model = train_ngram(&sentences, order, alpha)?;
            fs::write(&out, model.to_json()).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
            writeln!(
                stdout,
                "{{\"sentences\":{},\"order\":{order},\"alpha\":{alpha},\"vocabulary\":{}}}",
                sentences.len(),
                model.words().len()
            )
            .map_err(|e| Error::io("writing stdout", e))?;
            Ok(EXIT_OK)
        }
        Command::Generate {
            res,
            search,
            prompt,
            mode,
            all,
            score_first_line,
            out,
            manifest,
        } => {
            let engine = res.engine()?;
            let mut req = GenerationRequest::new(&prompt, mode, search.config());
            req.score_first_line = score_first_line;
            let records = engine.generate_records(&req)?;
            let text: String = if all {
                records.iter().map(to_json_line).collect()
            } else {
                to_json_line(&records[0])
            };
            emit(&out, stdout, &text)?;
            let config = serde_json::to_value(&req).expect("request serializes");
            write_manifest(&manifest, args, Some(&res), vec![search.seed], config, started)?;
            Ok(EXIT_OK)
        }
        Command::Storyline {
            res,
            prompt,
            count,
            seed,
            out,
            manifest,
        } => {
            let engine = res.engine()?;
            let model = engine.storyline_model();
            let mut text = String::new();
            for i in 0..count as u64 {
                let s = sample_storyline(&model, &prompt, seed.wrapping_add(i), DEFAULT_MAX_ATTEMPTS)?;
                text.push_str(&to_json_line(&s));
            }
            emit(&out, stdout, &text)?;
            let config = serde_json::json!({ "prompt": prompt, "count": count });
            write_manifest(&manifest, args, Some(&res), vec![seed], config, started)?;
            Ok(EXIT_OK)
        }
        Command::Validate { res, input, out } => {
            let r = res.paths()?.load()?;
            let v = Validator {
                lexicon: &r.lexicon,
                meter: &r.meter,
                bank: &r.bank,
                tags: &r.tags,
            };
            let mut text = String::new();
            let mut all_pass = true;
            for (i, line) in read_lines(&input)?.iter().enumerate() {
                let record: PoemRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Config(format!("{} record {}: {e}", input.display(), i + 1)))?;
                let report = v.validate_record(&record);
                all_pass &= report.hard_pass;
                text.push_str(&to_json_line(&report));
            }
            emit(&out, stdout, &text)?;
            Ok(if all_pass { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Compare {
            res,
            search,
            modes,
            prompts,
            n,
            seeds,
            sample_seed,
            sample_size,
            per_prompt,
            out,
            manifest,
        } => {
            let engine = res.engine()?;
            let prompts = read_lines(&prompts)?;
            let mut jobs: Vec<(Mode, &String, u64)> = Vec::new();
            for &mode in &modes {
                for prompt in &prompts {
                    jobs.extend(seeds.iter().map(|&seed| (mode, prompt, seed)));
                }
            }
            let results: Vec<Vec<PoemRecord>> = jobs
                .par_iter()
                .map(|&(mode, prompt, seed)| {
                    let cfg = SearchConfig {
                        rng_seed: seed,
                        ..search.config()
                    };
                    match engine.generate_records(&GenerationRequest::new(prompt, mode, cfg)) {
                        Ok(r) => Ok(r),
                        Err(e @ GenerationError::Failed { .. }) => {
                            log::warn!("{mode} `{prompt}` seed {seed}: {e}");
                            Ok(Vec::new())
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_, _>>()?;
            let mut runs: Vec<(String, Vec<PoemRecord>)> = Vec::new();
            for (&(mode, prompt, _), poems) in jobs.iter().zip(results) {
                let name = if per_prompt { format!("{mode}:{prompt}") } else { mode.to_string() };
                match runs.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, v)) => v.extend(poems),
                    None => runs.push((name, poems)),
                }
            }
            let borrowed: Vec<(&str, &[PoemRecord])> = runs.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            let rows = compare_runs(&borrowed, &n, sample_size, sample_seed)?;
            emit(&out, stdout, &comparison_csv(&rows))?;
            let config = serde_json::json!({
                "search": search.config(),
                "modes": modes,
                "n": n,
                "sample_seed": sample_seed,
                "sample_size": sample_size,
                "per_prompt": per_prompt,
            });
            write_manifest(&manifest, args, Some(&res), seeds, config, started)?;
            Ok(EXIT_OK)
        }
        Command::ServeCheck { lm } => {
            let model = LmSpec::parse(&lm)?.load()?;
            let dist = model.next_distribution(&[BOS])?;
            let mut top: Vec<(&Arc<str>, f64)> = dist.iter().collect();
            top.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            let top: Vec<serde_json::Value> = top
                .iter()
                .take(5)
                .map(|(w, p)| serde_json::json!({ "token": &***w, "prob": p }))
                .collect();
            let summary = serde_json::json!({
                "model": model.describe(),
                "support": dist.len(),
                "truncated": dist.truncated,
                "top": top,
            });
            emit(&None, stdout, &to_json_line(&summary))?;
            Ok(EXIT_OK)
        }
        Command::Replay { manifest } => {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(format!("reading {}", manifest.display()), e))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
            let here = std::env::current_dir().map_err(|e| Error::io("reading the working directory", e))?;
            if here != m.working_dir {
                return Err(Error::Config(format!("replay from {} (the recorded working directory)", m.working_dir.display())));
            }
            for r in &m.resources {
                let now = ResourceDigest::of(&r.label, &r.path)?;
                if now.sha256 != r.sha256 {
                    return Err(Error::Config(format!("{} ({}) changed since the run", r.label, r.path.display())));
                }
            }
            let mut argv = vec!["limerick".to_string()];
            argv.extend(m.argv.iter().cloned());
            let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("manifest arguments: {e}")))?;
            if matches!(cli.command, Command::Replay { .. }) {
                return Err(Error::Config("a manifest cannot replay another manifest".into()));
            }
            execute(cli.command, &m.argv, stdout)
        }
    }
}
