//! Wikipedia title / page ID ↔ Wikidata QID resolution.
//!
//! The offline path reads a frozen mapping dump (one page per row:
//! `page_id \t title \t qid \t redirect_to`). Redirect rows carry an empty
//! qid and the target title in the last column. [`live`] provides a cached
//! client for the public wiki APIs when no dump is at hand.

pub mod live;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::benchmark::is_qid;

/// Maximum number of redirect hops followed before giving up.
pub const MAX_REDIRECT_DEPTH: usize = 4;

/// A Wikidata item identifier (`Q` followed by digits).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Qid(String);

impl Qid {
    pub fn parse(s: &str) -> Option<Self> {
        is_qid(s).then(|| Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Qid {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if is_qid(&s) {
            Ok(Self(s))
        } else {
            Err(format!("invalid qid `{s}`"))
        }
    }
}

impl From<Qid> for String {
    fn from(q: Qid) -> String {
        q.0
    }
}

impl fmt::Display for Qid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A normalized Wikipedia title. Construct with [`normalize_title`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TitleKey(String);

impl TitleKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TitleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// NFC, underscores to spaces, whitespace runs collapsed and trimmed, first
/// character uppercased. Idempotent.
pub fn normalize_title(raw: &str) -> TitleKey {
    let composed: String = raw.nfc().map(|c| if c == '_' { ' ' } else { c }).collect();
    let collapsed = composed.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut chars = collapsed.chars();
    let upper_first: String = match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    // uppercasing can emit decomposed sequences
    TitleKey(upper_first.nfc().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbRecord {
    pub page_id: u64,
    pub canonical_title: TitleKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redirect_to: Option<TitleKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<Qid>,
}

impl KbRecord {
    pub fn is_redirect(&self) -> bool {
        self.redirect_to.is_some()
    }
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("cannot read mapping {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mapping line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("mapping line {line}: duplicate {what} `{key}`")]
    Duplicate {
        line: usize,
        what: &'static str,
        key: String,
    },
}

/// Immutable lookup tables over a mapping dump.
#[derive(Debug, Clone, Default)]
pub struct MappingIndex {
    records: Vec<KbRecord>,
    by_page: HashMap<u64, usize>,
    by_title: HashMap<TitleKey, usize>,
    by_qid: HashMap<Qid, Vec<usize>>,
    digest: String,
}

impl MappingIndex {
    pub fn from_records(records: Vec<KbRecord>) -> Result<Self, MappingError> {
        let mut idx = Self::default();
        for (i, rec) in records.into_iter().enumerate() {
            idx.insert(i + 1, rec)?;
        }
        Ok(idx)
    }

    fn insert(&mut self, line: usize, rec: KbRecord) -> Result<(), MappingError> {
        let pos = self.records.len();
        if self.by_page.insert(rec.page_id, pos).is_some() {
            return Err(MappingError::Duplicate {
                line,
                what: "page id",
                key: rec.page_id.to_string(),
            });
        }
        if self.by_title.insert(rec.canonical_title.clone(), pos).is_some() {
            return Err(MappingError::Duplicate {
                line,
                what: "title",
                key: rec.canonical_title.to_string(),
            });
        }
        if let Some(q) = &rec.qid {
            self.by_qid.entry(q.clone()).or_default().push(pos);
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[KbRecord] {
        &self.records
    }

    /// SHA-256 of the source file, empty for in-memory indexes.
    pub fn snapshot_digest(&self) -> &str {
        &self.digest
    }

    pub fn record_by_title(&self, title: &str) -> Option<&KbRecord> {
        self.by_title.get(&normalize_title(title)).map(|&i| &self.records[i])
    }

    fn resolve_from(&self, start: usize, follow_redirects: bool) -> Option<&Qid> {
        let mut current = start;
        let mut visited = vec![start];
        let mut hops = 0;
        loop {
            let rec = &self.records[current];
            if let Some(q) = &rec.qid {
                return Some(q);
            }
            let target = rec.redirect_to.as_ref()?;
            if !follow_redirects || hops == MAX_REDIRECT_DEPTH {
                return None;
            }
            current = *self.by_title.get(target)?;
            if visited.contains(&current) {
                return None;
            }
            visited.push(current);
            hops += 1;
        }
    }

    pub fn title_to_qid(&self, title: &str, follow_redirects: bool) -> Option<&Qid> {
        let start = *self.by_title.get(&normalize_title(title))?;
        self.resolve_from(start, follow_redirects)
    }

    pub fn pageid_to_qid(&self, page_id: u64) -> Option<&Qid> {
        let start = *self.by_page.get(&page_id)?;
        self.resolve_from(start, true)
    }

    /// Title of the page carrying `qid`, preferring non-redirect records.
    pub fn qid_to_title(&self, qid: &str) -> Option<&TitleKey> {
        let positions = self.by_qid.get(&Qid::parse(qid)?)?;
        let pick = positions
            .iter()
            .find(|&&i| !self.records[i].is_redirect())
            .or_else(|| positions.first())?;
        Some(&self.records[*pick].canonical_title)
    }
}

/// Load a mapping TSV. Duplicate titles or page IDs are rejected.
pub fn load_mapping(path: &Path) -> Result<MappingIndex, MappingError> {
    let bytes = fs::read(path).map_err(|source| MappingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| MappingError::Malformed {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut idx = parse_mapping(&text)?;
    idx.digest = hex::encode(Sha256::digest(&bytes));
    Ok(idx)
}

pub fn parse_mapping(text: &str) -> Result<MappingIndex, MappingError> {
    let mut idx = MappingIndex::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || (lineno == 1 && line.starts_with("page_id\t")) {
            continue;
        }
        let rec = parse_mapping_row(line).map_err(|message| MappingError::Malformed { line: lineno, message })?;
        idx.insert(lineno, rec)?;
    }
    Ok(idx)
}

fn parse_mapping_row(line: &str) -> Result<KbRecord, String> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(format!("expected 3 or 4 tab-separated fields, found {}", fields.len()));
    }
    let page_id: u64 = fields[0]
        .parse()
        .ok()
        .filter(|&p| p > 0)
        .ok_or_else(|| format!("invalid page id `{}`", fields[0]))?;
    if fields[1].is_empty() {
        return Err("empty title".into());
    }
    let canonical_title = normalize_title(fields[1]);
    let qid = match fields[2] {
        "" => None,
        q => Some(Qid::parse(q).ok_or_else(|| format!("invalid qid `{q}`"))?),
    };
    let redirect_to = fields.get(3).filter(|s| !s.is_empty()).map(|s| normalize_title(s));
    if redirect_to.as_ref() == Some(&canonical_title) {
        return Err(format!("`{canonical_title}` redirects to itself"));
    }
    Ok(KbRecord {
        page_id,
        canonical_title,
        redirect_to,
        qid,
    })
}
