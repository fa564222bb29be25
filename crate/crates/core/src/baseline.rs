//! Conversion of external linker output (mention + page ID and/or title)
//! into the shared predictions format with QIDs attached.
//!
//! Resolution precedence is page ID, then title, then a QID supplied by
//! the system itself. Rows that resolve through none of them are kept
//! with no QID so they still cost precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{MappingIndex, Qid};
use crate::predictions::{LinkRecord, PredictionRecord, RecordStatus, Resolution};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalPrediction {
    pub sentence_id: String,
    pub surface: String,
    #[serde(default)]
    pub page_id: Option<u64>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub qid: Option<String>,
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineConversion {
    pub records: Vec<PredictionRecord>,
    pub input_rows: usize,
    pub resolution_failures: usize,
}

impl BaselineConversion {
    pub fn link_count(&self) -> usize {
        self.records.iter().map(|r| r.links.len()).sum()
    }
}

pub fn load_external_predictions(path: &Path, idx: &MappingIndex) -> Result<BaselineConversion, BaselineError> {
    let text = fs::read_to_string(path).map_err(|source| BaselineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let rows = parse_external(&text)?;
    Ok(convert_external(&rows, idx))
}

pub fn parse_external(text: &str) -> Result<Vec<ExternalPrediction>, BaselineError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| BaselineError::Malformed { line: i + 1, message };
        let row: ExternalPrediction = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if row.page_id.is_none() && row.title.is_none() && row.qid.is_none() {
            return Err(malformed("row needs at least one of page_id, title, qid".into()));
        }
        if let Some(q) = &row.qid {
            if Qid::parse(q).is_none() {
                return Err(malformed(format!("invalid qid `{q}`")));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn resolve(row: &ExternalPrediction, idx: &MappingIndex) -> (Option<Qid>, Resolution) {
    if let Some(q) = row.page_id.and_then(|p| idx.pageid_to_qid(p)) {
        return (Some(q.clone()), Resolution::PageId);
    }
    if let Some(q) = row.title.as_deref().and_then(|t| idx.title_to_qid(t, true)) {
        return (Some(q.clone()), Resolution::Title);
    }
    if let Some(q) = row.qid.as_deref().and_then(Qid::parse) {
        return (Some(q), Resolution::GivenQid);
    }
    (None, Resolution::Unresolved)
}

/// Group rows by sentence (first-appearance order) and attach QIDs.
pub fn convert_external(rows: &[ExternalPrediction], idx: &MappingIndex) -> BaselineConversion {
    let mut records: Vec<PredictionRecord> = Vec::new();
    let mut failures = 0;
    for row in rows {
        let (qid, resolution) = resolve(row, idx);
        if resolution == Resolution::Unresolved {
            failures += 1;
        }
        let link = LinkRecord {
            surface: row.surface.clone(),
            title: row.title.clone(),
            qid,
            resolution: Some(resolution),
        };
        match records.iter_mut().find(|r| r.sentence_id == row.sentence_id) {
            Some(rec) => rec.links.push(link),
            None => records.push(PredictionRecord {
                sentence_id: row.sentence_id.clone(),
                links: vec![link],
                status: RecordStatus::Clean,
                error: None,
            }),
        }
    }
    BaselineConversion {
        records,
        input_rows: rows.len(),
        resolution_failures: failures,
    }
}
