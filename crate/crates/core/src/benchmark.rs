//! Gold benchmark records: loading, validation, serialization and summary
//! statistics.
//!
//! Two on-disk layouts are accepted. The primary one is JSONL with one
//! sentence per line:
//!
//! ```text
//! {"id":"s1","text":"...","mentions":[{"surface":"Rameau","qid":"Q1","type":"Person","start":3,"end":9}]}
//! ```
//!
//! The flat TSV export carries one mention per row
//! (`sentence_id \t text \t surface \t qid \t type`), rows grouped by
//! sentence. A row with empty surface, qid and type declares a sentence
//! without mentions.
//!
//! NIL mentions are kept; excluding them is the scorer's job.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel used in the qid field for mentions without a KB entry.
pub const NIL: &str = "NIL";

/// Returns true for strings of the form `Q[0-9]+`.
pub fn is_qid(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next() == Some('Q') && s.len() > 1 && chars.all(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkFormat {
    Jsonl,
    Tsv,
}

impl FromStr for BenchmarkFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown benchmark format `{other}` (expected jsonl or tsv)")),
        }
    }
}

impl BenchmarkFormat {
    /// Guess from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => Self::Tsv,
            _ => Self::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMention {
    pub surface: String,
    pub qid: String,
    #[serde(rename = "type", default)]
    pub entity_type: String,
    #[serde(rename = "start", default, skip_serializing_if = "Option::is_none")]
    pub char_start: Option<usize>,
    #[serde(rename = "end", default, skip_serializing_if = "Option::is_none")]
    pub char_end: Option<usize>,
}

impl GoldMention {
    pub fn new(surface: impl Into<String>, qid: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            qid: qid.into(),
            entity_type: entity_type.into(),
            char_start: None,
            char_end: None,
        }
    }

    pub fn is_nil(&self) -> bool {
        self.qid == NIL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSentence {
    #[serde(rename = "id")]
    pub sentence_id: String,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<GoldMention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Benchmark {
    pub name: String,
    pub sentences: Vec<BenchmarkSentence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSummary {
    pub sentences: usize,
    pub tokens: usize,
    pub unique_entities: usize,
    pub types: usize,
    pub mentions: usize,
    pub nil_mentions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineProblem {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("cannot read benchmark {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed benchmark {path}: {}", render_problems(.problems))]
    Malformed { path: PathBuf, problems: Vec<LineProblem> },
}

fn render_problems(problems: &[LineProblem]) -> String {
    problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Benchmark {
    pub fn mention_count(&self) -> usize {
        self.sentences.iter().map(|s| s.mentions.len()).sum()
    }

    pub fn sentence(&self, id: &str) -> Option<&BenchmarkSentence> {
        self.sentences.iter().find(|s| s.sentence_id == id)
    }

    /// Serialize as JSONL, one sentence per line, LF terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s).expect("sentence serializes"));
            out.push('\n');
        }
        out
    }

    pub fn stats(&self) -> StatsSummary {
        benchmark_stats(self)
    }
}

/// Load and validate a benchmark file. Any malformed record fails the
/// whole load; the error lists every offending line.
pub fn load_benchmark(path: &Path, format: BenchmarkFormat) -> Result<Benchmark, BenchmarkError> {
    let bytes = fs::read(path).map_err(|source| BenchmarkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| BenchmarkError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("benchmark")
        .to_string();
    parse_benchmark(&name, &text, format).map_err(|problems| BenchmarkError::Malformed {
        path: path.to_path_buf(),
        problems,
    })
}

/// Parse benchmark text already in memory.
pub fn parse_benchmark(name: &str, text: &str, format: BenchmarkFormat) -> Result<Benchmark, Vec<LineProblem>> {
    let (sentences, mut problems) = match format {
        BenchmarkFormat::Jsonl => parse_jsonl(text),
        BenchmarkFormat::Tsv => parse_tsv(text),
    };
    let mut seen = HashSet::new();
    for (line, s) in &sentences {
        if !seen.insert(s.sentence_id.as_str()) {
            problems.push(LineProblem {
                line: *line,
                message: format!("duplicate sentence id `{}`", s.sentence_id),
            });
        }
        for message in validate_sentence(s) {
            problems.push(LineProblem { line: *line, message });
        }
    }
    if problems.is_empty() {
        Ok(Benchmark {
            name: name.to_string(),
            sentences: sentences.into_iter().map(|(_, s)| s).collect(),
        })
    } else {
        problems.sort_by_key(|p| p.line);
        Err(problems)
    }
}

fn parse_jsonl(text: &str) -> (Vec<(usize, BenchmarkSentence)>, Vec<LineProblem>) {
    let mut sentences = Vec::new();
    let mut problems = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenchmarkSentence>(line) {
            Ok(s) => sentences.push((idx + 1, s)),
            Err(e) => problems.push(LineProblem {
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    (sentences, problems)
}

fn parse_tsv(text: &str) -> (Vec<(usize, BenchmarkSentence)>, Vec<LineProblem>) {
    let mut sentences: Vec<(usize, BenchmarkSentence)> = Vec::new();
    let mut problems = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() || (lineno == 1 && line.starts_with("sentence_id\t")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            problems.push(LineProblem {
                line: lineno,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
            continue;
        }
        let (id, text, surface, qid, ty) = (fields[0], fields[1], fields[2], fields[3], fields[4]);
        let continues = matches!(sentences.last(), Some((_, s)) if s.sentence_id == id);
        if continues {
            let current = &mut sentences.last_mut().expect("checked").1;
            if current.text != text {
                problems.push(LineProblem {
                    line: lineno,
                    message: format!("text differs from earlier rows of sentence `{id}`"),
                });
                continue;
            }
        } else {
            sentences.push((
                lineno,
                BenchmarkSentence {
                    sentence_id: id.to_string(),
                    text: text.to_string(),
                    mentions: Vec::new(),
                },
            ));
        }
        let empty_row = surface.is_empty() && qid.is_empty() && ty.is_empty();
        if !empty_row {
            sentences
                .last_mut()
                .expect("pushed above")
                .1
                .mentions
                .push(GoldMention::new(surface, qid, ty));
        }
    }
    (sentences, problems)
}

fn validate_sentence(s: &BenchmarkSentence) -> Vec<String> {
    let mut out = Vec::new();
    if s.sentence_id.is_empty() {
        out.push("empty sentence id".to_string());
    }
    if s.text.trim().is_empty() {
        out.push(format!("sentence `{}` has empty text", s.sentence_id));
    }
    let text_len = s.text.chars().count();
    for m in &s.mentions {
        if m.qid != NIL && !is_qid(&m.qid) {
            out.push(format!("mention `{}`: invalid qid `{}`", m.surface, m.qid));
        }
        if m.surface.is_empty() {
            out.push("mention with empty surface".to_string());
        }
        match (m.char_start, m.char_end) {
            (None, None) => {}
            (Some(start), Some(end)) => {
                if !(start < end && end <= text_len) {
                    out.push(format!(
                        "mention `{}`: offsets {start}..{end} out of range for text of {text_len} chars",
                        m.surface
                    ));
                } else {
                    let slice: String = s.text.chars().skip(start).take(end - start).collect();
                    if slice != m.surface {
                        out.push(format!(
                            "mention `{}`: offsets {start}..{end} cover `{slice}`",
                            m.surface
                        ));
                    }
                }
            }
            _ => out.push(format!("mention `{}`: start and end must both be present", m.surface)),
        }
    }
    out
}

/// Counts over the benchmark. Tokens are Unicode-whitespace separated;
/// unique entities and types consider non-NIL mentions only.
pub fn benchmark_stats(b: &Benchmark) -> StatsSummary {
    let mut qids = BTreeSet::new();
    let mut types = BTreeSet::new();
    let mut nil = 0;
    for m in b.sentences.iter().flat_map(|s| &s.mentions) {
        if m.is_nil() {
            nil += 1;
        } else {
            qids.insert(m.qid.as_str());
            types.insert(m.entity_type.as_str());
        }
    }
    StatsSummary {
        sentences: b.sentences.len(),
        tokens: b.sentences.iter().map(|s| s.text.split_whitespace().count()).sum(),
        unique_entities: qids.len(),
        types: types.len(),
        mentions: b.mention_count(),
        nil_mentions: nil,
    }
}
