//! Entity popularity as Wikidata statement counts, and threshold slices.
//!
//! A slice at θ keeps the gold mentions and the predicted entities with at
//! most θ statements, then scores what is left. Thresholds are cumulative:
//! θ = 40 includes everything θ = 20 does.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchmark::Benchmark;
use crate::kb::{MappingIndex, Qid};
use crate::predictions::PredictionRecord;
use crate::scorer::{csv_field, score, MatchConfig, MatchMode, ScoreError, ScoreReport};

#[derive(Debug, Error)]
pub enum PopularityError {
    #[error("malformed entity document: {0}")]
    MalformedDocument(String),
    #[error("cannot read counts {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("counts line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("network failure: {0}")]
    Network(String),
    #[error("threshold list is empty")]
    EmptyThetas,
    #[error("thresholds must be strictly ascending")]
    UnorderedThetas,
    #[error("no triple count for {0}")]
    UnknownQid(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Number of main statements across all properties of a Wikidata entity
/// document. Qualifiers and references are not counted.
pub fn triple_count(entity: &Value) -> Result<u64, PopularityError> {
    let claims = entity
        .get("claims")
        .or_else(|| entity.get("statements"))
        .ok_or_else(|| PopularityError::MalformedDocument("no claims section".into()))?;
    let claims = claims
        .as_object()
        .ok_or_else(|| PopularityError::MalformedDocument("claims is not an object".into()))?;
    claims.iter().try_fold(0u64, |acc, (prop, statements)| {
        let n = statements
            .as_array()
            .ok_or_else(|| PopularityError::MalformedDocument(format!("statements of {prop} are not a list")))?
            .len();
        Ok(acc + n as u64)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountsSource {
    CountsFile,
    Live,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopularityIndex {
    pub counts: BTreeMap<Qid, u64>,
    pub source: CountsSource,
    digest: String,
}

impl PopularityIndex {
    pub fn from_counts(counts: impl IntoIterator<Item = (Qid, u64)>) -> Self {
        Self {
            counts: counts.into_iter().collect(),
            source: CountsSource::CountsFile,
            digest: String::new(),
        }
    }

    pub fn get(&self, qid: &str) -> Option<u64> {
        Qid::parse(qid).and_then(|q| self.counts.get(&q).copied())
    }

    pub fn max_count(&self) -> Option<u64> {
        self.counts.values().copied().max()
    }

    pub fn snapshot_digest(&self) -> &str {
        &self.digest
    }
}

fn parse_counts(text: &str) -> Result<BTreeMap<Qid, u64>, PopularityError> {
    let mut counts = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || (lineno == 1 && line.starts_with("qid\t")) {
            continue;
        }
        let malformed = |message: String| PopularityError::Malformed { line: lineno, message };
        let (q, c) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected `qid \\t count`".into()))?;
        let qid = Qid::parse(q.trim()).ok_or_else(|| malformed(format!("invalid qid `{q}`")))?;
        let count: u64 = c
            .trim()
            .parse()
            .map_err(|_| malformed(format!("invalid count `{c}`")))?;
        if counts.insert(qid, count).is_some() {
            return Err(malformed(format!("duplicate qid `{q}`")));
        }
    }
    Ok(counts)
}

pub fn load_counts(path: &Path) -> Result<PopularityIndex, PopularityError> {
    let bytes = fs::read(path).map_err(|source| PopularityError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    Ok(PopularityIndex {
        counts: parse_counts(&text)?,
        source: CountsSource::CountsFile,
        digest: hex::encode(Sha256::digest(&bytes)),
    })
}

#[derive(Debug, Clone)]
pub struct CountsFetchConfig {
    pub wikidata_api: String,
    /// Counts file that doubles as the cache.
    pub counts_path: PathBuf,
    pub timeout: Duration,
    pub batch_size: usize,
}

impl CountsFetchConfig {
    pub fn new(counts_path: impl Into<PathBuf>) -> Self {
        Self {
            wikidata_api: "https://www.wikidata.org/w/api.php".into(),
            counts_path: counts_path.into(),
            timeout: Duration::from_secs(30),
            batch_size: 50,
        }
    }
}

/// Fetch statement counts for `qids` not already in the counts file, append
/// them to it, and return the index over the whole file. Entities the API
/// reports as missing are recorded with count 0.
pub fn fetch_counts(cfg: &CountsFetchConfig, qids: &[Qid]) -> Result<PopularityIndex, PopularityError> {
    let io_err = |source| PopularityError::Io {
        path: cfg.counts_path.display().to_string(),
        source,
    };
    let mut counts = match fs::read_to_string(&cfg.counts_path) {
        Ok(text) => parse_counts(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(io_err(e)),
    };
    let wanted: BTreeSet<&Qid> = qids.iter().filter(|q| !counts.contains_key(*q)).collect();
    let wanted: Vec<&Qid> = wanted.into_iter().collect();
    if !wanted.is_empty() {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .user_agent(concat!("tailink/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| PopularityError::Network(e.to_string()))?;
        let mut out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cfg.counts_path)
            .map_err(io_err)?;
        for chunk in wanted.chunks(cfg.batch_size.max(1)) {
            let ids = chunk.iter().map(|q| q.as_str()).collect::<Vec<_>>().join("|");
            let body: Value = client
                .get(&cfg.wikidata_api)
                .query(&[
                    ("action", "wbgetentities"),
                    ("format", "json"),
                    ("props", "claims"),
                    ("ids", &ids),
                ])
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| PopularityError::Network(e.to_string()))?
                .json()
                .map_err(|e| PopularityError::MalformedDocument(e.to_string()))?;
            for q in chunk {
                let entity = body
                    .pointer(&format!("/entities/{}", q.as_str()))
                    .ok_or_else(|| PopularityError::MalformedDocument(format!("no entity {q} in response")))?;
                let n = if entity.get("missing").is_some() {
                    0
                } else {
                    triple_count(entity)?
                };
                writeln!(out, "{q}\t{n}").map_err(io_err)?;
                counts.insert((*q).clone(), n);
            }
        }
    }
    let bytes = fs::read(&cfg.counts_path).unwrap_or_default();
    Ok(PopularityIndex {
        counts,
        source: CountsSource::Live,
        digest: hex::encode(Sha256::digest(&bytes)),
    })
}

/// A popularity cutoff; `Infinite` keeps everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Theta {
    Finite(u64),
    Infinite,
}

impl Theta {
    pub fn admits(&self, count: Option<u64>) -> bool {
        match (self, count) {
            (Theta::Infinite, _) => true,
            (Theta::Finite(t), Some(c)) => c <= *t,
            (Theta::Finite(_), None) => false,
        }
    }

    pub fn slice_id(&self) -> String {
        match self {
            Theta::Finite(t) => format!("θ≤{t}"),
            Theta::Infinite => "θ≤∞".to_string(),
        }
    }

    pub fn default_grid() -> Vec<Theta> {
        vec![
            Theta::Finite(20),
            Theta::Finite(40),
            Theta::Finite(60),
            Theta::Finite(80),
            Theta::Finite(100),
            Theta::Infinite,
        ]
    }

    /// Parse a comma-separated list such as `20,40,inf`.
    pub fn parse_list(s: &str) -> Result<Vec<Theta>, String> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Theta::Finite(t) => write!(f, "{t}"),
            Theta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Theta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "∞" => Ok(Theta::Infinite),
            t => match t.parse::<u64>() {
                Ok(v) if v > 0 => Ok(Theta::Finite(v)),
                _ => Err(format!("invalid threshold `{t}` (positive integer or inf)")),
            },
        }
    }
}

impl From<Theta> for String {
    fn from(t: Theta) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Theta {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingCounts {
    /// Any needed QID without a count is an error.
    #[default]
    Strict,
    /// Treat missing counts as +∞ and tally them.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSlice {
    pub theta: Theta,
    pub retained_gold: u64,
    pub retained_predictions: u64,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub system_id: String,
    pub slices: Vec<ThresholdSlice>,
    /// Distinct QIDs that had no count (lenient mode).
    pub missing_counts: u64,
}

impl Stratification {
    pub const CSV_HEADER: &'static str = "system,theta,precision,recall,f1";

    /// One `system,theta,precision,recall,f1` row per slice, percentages.
    pub fn csv_rows(&self) -> Vec<String> {
        self.slices
            .iter()
            .map(|s| {
                format!(
                    "{},{},{:.1},{:.1},{:.1}",
                    csv_field(&self.system_id),
                    s.theta,
                    s.report.precision_pct(),
                    s.report.recall_pct(),
                    s.report.f1_pct()
                )
            })
            .collect()
    }
}

/// QID a prediction refers to, if it can be determined.
fn predicted_entity(link: &crate::predictions::LinkRecord, mode: MatchMode, kb: Option<&MappingIndex>) -> Option<Qid> {
    match mode {
        MatchMode::Qid => link.qid.clone(),
        MatchMode::Title => link
            .qid
            .clone()
            .or_else(|| kb?.title_to_qid(link.title.as_deref()?, true).cloned()),
    }
}

/// Keep the part of (gold, preds) admitted by `theta`.
pub fn filter_instance(
    gold: &Benchmark,
    preds: &[PredictionRecord],
    cfg: &MatchConfig,
    kb: Option<&MappingIndex>,
    pop: &PopularityIndex,
    theta: Theta,
) -> (Benchmark, Vec<PredictionRecord>) {
    let mut fgold = gold.clone();
    for s in &mut fgold.sentences {
        s.mentions.retain(|m| m.is_nil() || theta.admits(pop.get(&m.qid)));
    }
    let fpreds = preds
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.links.retain(|l| match predicted_entity(l, cfg.mode, kb) {
                Some(q) => theta.admits(pop.counts.get(&q).copied()),
                // unknowable popularity: keep, it must still cost precision
                None => true,
            });
            r
        })
        .collect();
    (fgold, fpreds)
}

#[allow(clippy::too_many_arguments)]
pub fn stratify(
    system_id: &str,
    gold: &Benchmark,
    preds: &[PredictionRecord],
    cfg: &MatchConfig,
    kb: Option<&MappingIndex>,
    pop: &PopularityIndex,
    thetas: &[Theta],
    missing: MissingCounts,
) -> Result<Stratification, PopularityError> {
    if thetas.is_empty() {
        return Err(PopularityError::EmptyThetas);
    }
    if thetas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PopularityError::UnorderedThetas);
    }

    let mut needed: BTreeSet<Qid> = gold
        .sentences
        .iter()
        .flat_map(|s| &s.mentions)
        .filter(|m| !m.is_nil())
        .filter_map(|m| Qid::parse(&m.qid))
        .collect();
    needed.extend(
        preds
            .iter()
            .flat_map(|r| &r.links)
            .filter_map(|l| predicted_entity(l, cfg.mode, kb)),
    );
    let absent: Vec<&Qid> = needed.iter().filter(|q| !pop.counts.contains_key(*q)).collect();
    if missing == MissingCounts::Strict {
        if let Some(q) = absent.first() {
            return Err(PopularityError::UnknownQid(q.to_string()));
        }
    }

    let mut slices = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let (fgold, fpreds) = filter_instance(gold, preds, cfg, kb, pop, theta);
        let mut report = score(system_id, &fgold, &fpreds, cfg, kb)?;
        report.slice_id = theta.slice_id();
        slices.push(ThresholdSlice {
            theta,
            retained_gold: fgold
                .sentences
                .iter()
                .flat_map(|s| &s.mentions)
                .filter(|m| !m.is_nil())
                .count() as u64,
            retained_predictions: fpreds.iter().map(|r| r.links.len() as u64).sum(),
            report,
        });
    }
    Ok(Stratification {
        system_id: system_id.to_string(),
        slices,
        missing_counts: absent.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{BenchmarkSentence, GoldMention};
    use crate::predictions::{LinkRecord, RecordStatus};
    use serde_json::json;

    #[test]
    fn triple_count_documents() {
        assert_eq!(triple_count(&json!({"id":"Q1","claims":{}})).unwrap(), 0);
        let doc = json!({"id":"Q1","claims":{
            "P31":[{"mainsnak":{},"qualifiers":{"P580":[{}, {}]},"references":[{}]},{"mainsnak":{}}],
            "P19":[{"mainsnak":{}}],
            "P800":[{},{},{},{}]
        }});
        assert_eq!(triple_count(&doc).unwrap(), 7);
        assert!(triple_count(&json!({"id":"Q1"})).is_err());
        assert!(triple_count(&json!({"claims":[]})).is_err());
        assert!(triple_count(&json!({"claims":{"P1":{}}})).is_err());
    }

    #[test]
    fn theta_boundary_is_inclusive() {
        assert!(Theta::Finite(20).admits(Some(20)));
        assert!(!Theta::Finite(20).admits(Some(21)));
        assert!(!Theta::Finite(20).admits(None));
        assert!(Theta::Infinite.admits(None));
    }

    #[test]
    fn theta_parsing() {
        assert_eq!(
            Theta::parse_list("20,40,inf").unwrap(),
            vec![Theta::Finite(20), Theta::Finite(40), Theta::Infinite]
        );
        assert!(Theta::parse_list("0").is_err());
        assert!(Theta::parse_list("x").is_err());
        assert_eq!(Theta::Finite(20).slice_id(), "θ≤20");
    }

    #[test]
    fn counts_file_parsing() {
        let c = parse_counts("qid\tcount\nQ315346\t73\n").unwrap();
        assert_eq!(c[&Qid::parse("Q315346").unwrap()], 73);
        assert!(parse_counts("").unwrap().is_empty());
        assert!(parse_counts("Q1\t-3\n").is_err());
        assert!(parse_counts("Q1 3\n").is_err());
        assert!(parse_counts("Q1\t3\nQ1\t4\n").is_err());
    }

    fn two_entity_case() -> (Benchmark, Vec<PredictionRecord>, PopularityIndex) {
        let gold = Benchmark {
            name: "g".into(),
            sentences: vec![BenchmarkSentence {
                sentence_id: "s".into(),
                text: "a b".into(),
                mentions: vec![GoldMention::new("a", "Q1", "T"), GoldMention::new("b", "Q2", "T")],
            }],
        };
        let preds = vec![PredictionRecord {
            sentence_id: "s".into(),
            links: vec![
                LinkRecord::with_qid("a", Qid::parse("Q1")),
                LinkRecord::with_qid("b", Qid::parse("Q2")),
                LinkRecord::with_qid("c", None),
            ],
            status: RecordStatus::Clean,
            error: None,
        }];
        let pop = PopularityIndex::from_counts([(Qid::parse("Q1").unwrap(), 5), (Qid::parse("Q2").unwrap(), 100)]);
        (gold, preds, pop)
    }

    #[test]
    fn only_unpopular_entities_at_low_theta() {
        let (gold, preds, pop) = two_entity_case();
        let cfg = MatchConfig::new(MatchMode::Qid);
        let st = stratify(
            "x",
            &gold,
            &preds,
            &cfg,
            None,
            &pop,
            &[Theta::Finite(20)],
            MissingCounts::Strict,
        )
        .unwrap();
        let r = &st.slices[0].report;
        assert_eq!(st.slices[0].retained_gold, 1);
        // Q1 matched, unresolvable prediction kept as FP, Q2 filtered on both sides
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert_eq!(r.slice_id, "θ≤20");
    }

    #[test]
    fn strict_and_lenient_missing_counts() {
        let (gold, preds, _) = two_entity_case();
        let pop = PopularityIndex::from_counts([(Qid::parse("Q1").unwrap(), 5)]);
        let cfg = MatchConfig::new(MatchMode::Qid);
        let thetas = [Theta::Finite(20), Theta::Infinite];
        assert!(matches!(
            stratify("x", &gold, &preds, &cfg, None, &pop, &thetas, MissingCounts::Strict),
            Err(PopularityError::UnknownQid(q)) if q == "Q2"
        ));
        let st = stratify("x", &gold, &preds, &cfg, None, &pop, &thetas, MissingCounts::Lenient).unwrap();
        assert_eq!(st.missing_counts, 1);
        assert_eq!(st.slices[0].retained_gold, 1);
        assert_eq!(st.slices[1].retained_gold, 2);
    }

    #[test]
    fn theta_list_errors() {
        let (gold, preds, pop) = two_entity_case();
        let cfg = MatchConfig::new(MatchMode::Qid);
        assert!(matches!(
            stratify("x", &gold, &preds, &cfg, None, &pop, &[], MissingCounts::Strict),
            Err(PopularityError::EmptyThetas)
        ));
        assert!(matches!(
            stratify(
                "x",
                &gold,
                &preds,
                &cfg,
                None,
                &pop,
                &[Theta::Finite(40), Theta::Finite(20)],
                MissingCounts::Strict
            ),
            Err(PopularityError::UnorderedThetas)
        ));
    }
}
