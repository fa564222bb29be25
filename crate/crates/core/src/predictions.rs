//! The predictions interchange file: one JSONL record per sentence.
//!
//! ```text
//! {"sentence_id":"s1","links":[{"surface":"Rameau","title":"Jean-Philippe Rameau"}],"status":"clean"}
//! ```
//!
//! Baseline conversions add `qid` and `resolution` to each link.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::Qid;
use crate::parser::{ParseOutcome, ParseStatus};

/// How a baseline link obtained its QID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    PageId,
    Title,
    #[serde(rename = "qid")]
    GivenQid,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<Qid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
}

impl LinkRecord {
    pub fn titled(surface: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            title: Some(title.into()),
            qid: None,
            resolution: None,
        }
    }

    pub fn with_qid(surface: impl Into<String>, qid: Option<Qid>) -> Self {
        Self {
            surface: surface.into(),
            title: None,
            qid,
            resolution: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Clean,
    Repaired,
    Unparseable,
    /// The backend returned no completion for this sentence.
    Failed,
}

impl From<ParseStatus> for RecordStatus {
    fn from(s: ParseStatus) -> Self {
        match s {
            ParseStatus::Clean => Self::Clean,
            ParseStatus::Repaired => Self::Repaired,
            ParseStatus::Unparseable => Self::Unparseable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sentence_id: String,
    pub links: Vec<LinkRecord>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn from_outcome(sentence_id: &str, outcome: &ParseOutcome) -> Self {
        Self {
            sentence_id: sentence_id.to_string(),
            links: outcome
                .links
                .iter()
                .map(|l| LinkRecord::titled(&l.surface, &l.title))
                .collect(),
            status: outcome.status.into(),
            error: None,
        }
    }

    pub fn failed(sentence_id: &str, error: String) -> Self {
        Self {
            sentence_id: sentence_id.to_string(),
            links: Vec::new(),
            status: RecordStatus::Failed,
            error: Some(error),
        }
    }
}

#[derive(Debug, Error)]
pub enum PredictionsError {
    #[error("cannot read predictions {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("predictions {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> std::io::Result<()> {
    fs::write(path, predictions_to_jsonl(records))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PredictionsError> {
    let text = fs::read_to_string(path).map_err(|source| PredictionsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PredictionsError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
