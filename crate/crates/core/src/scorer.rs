//! Exact-match precision / recall / F1.
//!
//! Matching is per sentence and per identifier: a prediction is a true
//! positive when its identifier (normalized title, or QID) equals a still
//! unmatched gold identifier of the same sentence. Each gold mention can
//! absorb one prediction, so repeats of one entity count as false
//! positives. Counts are micro-aggregated over sentences.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::Benchmark;
use crate::kb::{normalize_title, MappingIndex};
use crate::manifest::RunManifest;
use crate::predictions::{LinkRecord, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Compare predicted titles with the gold QID's title (LLM systems).
    Title,
    /// Compare QIDs (systems that link to page IDs or QIDs).
    Qid,
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "title" => Ok(Self::Title),
            "qid" => Ok(Self::Qid),
            other => Err(format!("unknown match mode `{other}` (expected title or qid)")),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Title => "title",
            Self::Qid => "qid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NilPolicy {
    /// Drop NIL gold mentions and discard predictions whose surface equals
    /// a NIL mention's surface in the same sentence.
    #[default]
    ExcludeGoldAndIgnoreMatchingPreds,
    /// Drop NIL gold mentions only; predictions on them become FPs.
    ExcludeGoldOnly,
}

impl FromStr for NilPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exclude-gold-and-ignore-matching-preds" => Ok(Self::ExcludeGoldAndIgnoreMatchingPreds),
            "exclude-gold-only" => Ok(Self::ExcludeGoldOnly),
            other => Err(format!("unknown NIL policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub mode: MatchMode,
    #[serde(default)]
    pub nil_policy: NilPolicy,
}

impl MatchConfig {
    pub fn new(mode: MatchMode) -> Self {
        Self {
            mode,
            nil_policy: NilPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when tp + fp = 0 and precision was set to 0 by convention.
    pub precision_defined: bool,
    /// False when tp + fn = 0 and recall was set to 0 by convention.
    pub recall_defined: bool,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> Metrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        precision,
        recall,
        f1: f1_from_pr(precision, recall),
        precision_defined: tp + fp > 0,
        recall_defined: tp + fn_ > 0,
    }
}

/// `num/den` as a percentage rounded half-up to one decimal, computed in
/// integers so that exact halves round consistently.
pub fn percent_1dp(num: u64, den: u64) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let tenths = (2000 * num as u128 + den as u128) / (2 * den as u128);
    tenths as f64 / 10.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub sentence_id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub system_id: String,
    pub slice_id: String,
    pub mode: MatchMode,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    /// NIL gold mentions removed before matching.
    pub nil_gold_excluded: u64,
    /// Predictions discarded because they sit on a NIL mention.
    pub nil_predictions_ignored: u64,
    /// Gold mentions whose QID has no title in the KB (title mode only).
    pub unmaterialized_gold: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sentence: Option<Vec<SentenceScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

impl ScoreReport {
    pub fn precision_pct(&self) -> f64 {
        percent_1dp(self.tp, self.tp + self.fp)
    }

    pub fn recall_pct(&self) -> f64 {
        percent_1dp(self.tp, self.tp + self.fn_)
    }

    /// F1 = 2tp / (2tp + fp + fn), so it rounds exactly too.
    pub fn f1_pct(&self) -> f64 {
        percent_1dp(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub const CSV_HEADER: &'static str = "system,slice,tp,fp,fn,precision,recall,f1";

    /// `system,slice,tp,fp,fn,precision,recall,f1` with percentages.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.1},{:.1},{:.1}",
            csv_field(&self.system_id),
            csv_field(&self.slice_id),
            self.tp,
            self.fp,
            self.fn_,
            self.precision_pct(),
            self.recall_pct(),
            self.f1_pct()
        )
    }
}

/// Quote a CSV field when it contains a delimiter, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("prediction for unknown sentence `{0}`")]
    UnknownSentence(String),
    #[error("more than one prediction record for sentence `{0}`")]
    DuplicateRecord(String),
    #[error("title mode needs a KB mapping to materialize gold titles")]
    MissingKb,
}

/// In title mode a link carrying a QID is compared through the KB's title
/// for that QID, so QID-producing systems can share a title-mode table.
fn link_identifier(link: &LinkRecord, mode: MatchMode, kb: Option<&MappingIndex>) -> Option<String> {
    match mode {
        MatchMode::Title => link
            .qid
            .as_ref()
            .and_then(|q| kb?.qid_to_title(q.as_str()))
            .map(|t| t.as_str().to_string())
            .or_else(|| link.title.as_deref().map(|t| normalize_title(t).as_str().to_string())),
        MatchMode::Qid => link.qid.as_ref().map(|q| q.as_str().to_string()),
    }
}

pub fn score(
    system_id: &str,
    gold: &Benchmark,
    preds: &[PredictionRecord],
    cfg: &MatchConfig,
    kb: Option<&MappingIndex>,
) -> Result<ScoreReport, ScoreError> {
    if cfg.mode == MatchMode::Title && kb.is_none() {
        return Err(ScoreError::MissingKb);
    }
    let known: HashSet<&str> = gold.sentences.iter().map(|s| s.sentence_id.as_str()).collect();
    let mut by_sentence: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if !known.contains(p.sentence_id.as_str()) {
            return Err(ScoreError::UnknownSentence(p.sentence_id.clone()));
        }
        if by_sentence.insert(p.sentence_id.as_str(), p).is_some() {
            return Err(ScoreError::DuplicateRecord(p.sentence_id.clone()));
        }
    }

    let mut report = ScoreReport {
        system_id: system_id.to_string(),
        slice_id: "all".to_string(),
        mode: cfg.mode,
        tp: 0,
        fp: 0,
        fn_: 0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        precision_defined: false,
        recall_defined: false,
        nil_gold_excluded: 0,
        nil_predictions_ignored: 0,
        unmaterialized_gold: 0,
        per_sentence: None,
        manifest: None,
    };
    let mut per_sentence = Vec::with_capacity(gold.sentences.len());

    for sentence in &gold.sentences {
        let mut nil_surfaces: HashSet<&str> = HashSet::new();
        let mut remaining: HashMap<String, u64> = HashMap::new();
        for m in &sentence.mentions {
            if m.is_nil() {
                nil_surfaces.insert(m.surface.as_str());
                report.nil_gold_excluded += 1;
                continue;
            }
            let id = match cfg.mode {
                MatchMode::Qid => Some(m.qid.clone()),
                MatchMode::Title => kb
                    .expect("checked above")
                    .qid_to_title(&m.qid)
                    .map(|t| t.as_str().to_string()),
            };
            match id {
                Some(id) => *remaining.entry(id).or_default() += 1,
                None => report.unmaterialized_gold += 1,
            }
        }

        let mut s = SentenceScore {
            sentence_id: sentence.sentence_id.clone(),
            tp: 0,
            fp: 0,
            fn_: 0,
        };
        let links = by_sentence
            .get(sentence.sentence_id.as_str())
            .map(|r| r.links.as_slice())
            .unwrap_or_default();
        for link in links {
            if cfg.nil_policy == NilPolicy::ExcludeGoldAndIgnoreMatchingPreds
                && nil_surfaces.contains(link.surface.as_str())
            {
                report.nil_predictions_ignored += 1;
                continue;
            }
            match link_identifier(link, cfg.mode, kb).and_then(|id| remaining.get_mut(&id)) {
                Some(left) if *left > 0 => {
                    *left -= 1;
                    s.tp += 1;
                }
                _ => s.fp += 1,
            }
        }
        s.fn_ = remaining.values().sum();
        report.tp += s.tp;
        report.fp += s.fp;
        report.fn_ += s.fn_;
        per_sentence.push(s);
    }

    let m = f1_from_counts(report.tp, report.fp, report.fn_);
    report.precision = m.precision;
    report.recall = m.recall;
    report.f1 = m.f1;
    report.precision_defined = m.precision_defined;
    report.recall_defined = m.recall_defined;
    report.per_sentence = Some(per_sentence);
    Ok(report)
}
