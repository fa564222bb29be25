//! Cached lookups against the public Wikipedia and Wikidata APIs.
//!
//! Every answer, including "not found", is appended to a JSONL journal
//! keyed by the normalized input. The journal is compacted on open, so a
//! second run with the same inputs never touches the network.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{normalize_title, KbRecord, Qid};

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub wikipedia_api: String,
    pub wikidata_api: String,
    pub cache_path: PathBuf,
    pub timeout: Duration,
    pub user_agent: String,
}

impl LiveConfig {
    pub fn new(cache_path: impl Into<PathBuf>) -> Self {
        Self {
            wikipedia_api: "https://en.wikipedia.org/w/api.php".into(),
            wikidata_api: "https://www.wikidata.org/w/api.php".into(),
            cache_path: cache_path.into(),
            timeout: Duration::from_secs(30),
            user_agent: concat!("tailink/", env!("CARGO_PKG_VERSION")).into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("malformed API response: {0}")]
    Malformed(String),
    #[error("cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LiveQuery {
    Title(String),
    Qid(Qid),
}

impl LiveQuery {
    fn cache_key(&self) -> String {
        match self {
            LiveQuery::Title(t) => format!("title:{}", normalize_title(t)),
            LiveQuery::Qid(q) => format!("qid:{q}"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalEntry {
    key: String,
    record: Option<KbRecord>,
}

pub struct LiveResolver {
    cfg: LiveConfig,
    client: reqwest::blocking::Client,
    cache: RwLock<HashMap<String, Option<KbRecord>>>,
    journal: Mutex<File>,
}

impl LiveResolver {
    pub fn open(cfg: LiveConfig) -> Result<Self, LiveError> {
        let cache = compact_journal(&cfg.cache_path)?;
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cfg.cache_path)
            .map_err(|source| cache_err(&cfg.cache_path, source))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .user_agent(cfg.user_agent.clone())
            .build()
            .map_err(|e| LiveError::Network(e.to_string()))?;
        Ok(Self {
            cfg,
            client,
            cache: RwLock::new(cache),
            journal: Mutex::new(journal),
        })
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    /// Resolve a title or QID to a page record. `Ok(None)` is a definite
    /// not-found and is cached like any other answer.
    pub fn live_lookup(&self, query: &LiveQuery) -> Result<Option<KbRecord>, LiveError> {
        let key = query.cache_key();
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let answer = match query {
            LiveQuery::Title(t) => self.fetch_title(normalize_title(t).as_str())?,
            LiveQuery::Qid(q) => match self.fetch_sitelink(q)? {
                Some(title) => self.live_lookup(&LiveQuery::Title(title))?,
                None => None,
            },
        };
        self.remember(key, answer.clone())?;
        Ok(answer)
    }

    fn remember(&self, key: String, record: Option<KbRecord>) -> Result<(), LiveError> {
        let line = serde_json::to_string(&JournalEntry {
            key: key.clone(),
            record: record.clone(),
        })
        .expect("journal entry serializes");
        {
            let mut f = self.journal.lock().expect("journal lock");
            writeln!(f, "{line}").map_err(|source| cache_err(&self.cfg.cache_path, source))?;
        }
        self.cache.write().expect("cache lock").insert(key, record);
        Ok(())
    }

    fn get_json(&self, url: &str, params: &[(&str, &str)]) -> Result<Value, LiveError> {
        let resp = self
            .client
            .get(url)
            .query(params)
            .send()
            .map_err(|e| LiveError::Network(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LiveError::Network(format!("HTTP {status} from {url}")));
        }
        resp.json().map_err(|e| LiveError::Malformed(e.to_string()))
    }

    fn fetch_title(&self, title: &str) -> Result<Option<KbRecord>, LiveError> {
        let body = self.get_json(
            &self.cfg.wikipedia_api,
            &[
                ("action", "query"),
                ("format", "json"),
                ("formatversion", "2"),
                ("redirects", "1"),
                ("prop", "pageprops"),
                ("ppprop", "wikibase_item"),
                ("titles", title),
            ],
        )?;
        parse_page_query(&body)
    }

    fn fetch_sitelink(&self, qid: &Qid) -> Result<Option<String>, LiveError> {
        let body = self.get_json(
            &self.cfg.wikidata_api,
            &[
                ("action", "wbgetentities"),
                ("format", "json"),
                ("props", "sitelinks"),
                ("sitefilter", "enwiki"),
                ("ids", qid.as_str()),
            ],
        )?;
        parse_sitelink(&body, qid)
    }
}

fn cache_err(path: &Path, source: std::io::Error) -> LiveError {
    LiveError::Cache {
        path: path.display().to_string(),
        source,
    }
}

/// Read the journal (last write wins), then rewrite it with one line per key.
/// Unreadable lines, e.g. a torn final append, are dropped.
fn compact_journal(path: &Path) -> Result<HashMap<String, Option<KbRecord>>, LiveError> {
    let mut map = HashMap::new();
    let mut order = Vec::new();
    match File::open(path) {
        Ok(f) => {
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|source| cache_err(path, source))?;
                if let Ok(entry) = serde_json::from_str::<JournalEntry>(&line) {
                    if !map.contains_key(&entry.key) {
                        order.push(entry.key.clone());
                    }
                    map.insert(entry.key, entry.record);
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(map),
        Err(source) => return Err(cache_err(path, source)),
    }
    let mut out = String::new();
    for key in order {
        let entry = JournalEntry {
            record: map[&key].clone(),
            key,
        };
        out.push_str(&serde_json::to_string(&entry).expect("journal entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| cache_err(path, source))?;
    Ok(map)
}

/// Interpret an `action=query` response (formatversion 2) for one title.
fn parse_page_query(body: &Value) -> Result<Option<KbRecord>, LiveError> {
    let pages = body
        .pointer("/query/pages")
        .and_then(Value::as_array)
        .ok_or_else(|| LiveError::Malformed("missing query.pages".into()))?;
    let Some(page) = pages.first() else {
        return Ok(None);
    };
    if page.get("missing").is_some() || page.get("invalid").is_some() {
        return Ok(None);
    }
    let page_id = page
        .get("pageid")
        .and_then(Value::as_u64)
        .ok_or_else(|| LiveError::Malformed("page without pageid".into()))?;
    let title = page
        .get("title")
        .and_then(Value::as_str)
        .ok_or_else(|| LiveError::Malformed("page without title".into()))?;
    let qid = match page.pointer("/pageprops/wikibase_item").and_then(Value::as_str) {
        Some(q) => Some(Qid::parse(q).ok_or_else(|| LiveError::Malformed(format!("bad wikibase_item `{q}`")))?),
        None => None,
    };
    // a page with no item is indistinguishable from a tombstone
    Ok(qid.map(|qid| KbRecord {
        page_id,
        canonical_title: normalize_title(title),
        redirect_to: None,
        qid: Some(qid),
    }))
}

/// Interpret a `wbgetentities` response: the enwiki title of `qid`, if any.
fn parse_sitelink(body: &Value, qid: &Qid) -> Result<Option<String>, LiveError> {
    let entities = body
        .get("entities")
        .and_then(Value::as_object)
        .ok_or_else(|| LiveError::Malformed("missing entities".into()))?;
    let Some(entity) = entities.get(qid.as_str()) else {
        return Ok(None);
    };
    if entity.get("missing").is_some() {
        return Ok(None);
    }
    Ok(entity
        .pointer("/sitelinks/enwiki/title")
        .and_then(Value::as_str)
        .map(str::to_string))
}
