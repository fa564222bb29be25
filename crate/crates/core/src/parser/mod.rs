//! Extraction of (mention → Wikipedia title) pairs from raw completions.
//!
//! The expected shape is `[{"Entities":{"span":"Title", ...}}]`. Inputs
//! that are not exactly that go through a fixed repair ladder:
//!
//! 1. surrounding prose is stripped down to the first bracketed value that
//!    has the expected shape;
//! 2. a single `{"Entities":{...}}` object is accepted without the array;
//! 3. one trailing comma before a closer is tolerated;
//! 4. containers left open (a missing final brace, or `]` arriving inside
//!    an open object) are closed.
//!
//! Anything else is `unparseable` with no links. Parsing never fails.

mod reader;

use serde::{Deserialize, Serialize};

use reader::{parse_strict, parse_value_at, Value};

const ENTITIES_KEY: &str = "Entities";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkOrigin {
    ParsedClean,
    ParsedRepaired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedLink {
    pub surface: String,
    pub title: String,
    pub origin: LinkOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Repaired,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub links: Vec<PredictedLink>,
    pub status: ParseStatus,
    pub diagnostics: Vec<String>,
}

impl ParseOutcome {
    fn unparseable(diagnostics: Vec<String>) -> Self {
        Self {
            links: Vec::new(),
            status: ParseStatus::Unparseable,
            diagnostics,
        }
    }

    /// Canonical `[{"Entities":{...}}]` rendering of the recovered links.
    pub fn to_canonical_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for l in &self.links {
            map.insert(l.surface.clone(), serde_json::Value::String(l.title.clone()));
        }
        let mut wrapper = serde_json::Map::new();
        wrapper.insert(ENTITIES_KEY.to_string(), serde_json::Value::Object(map));
        serde_json::Value::Array(vec![serde_json::Value::Object(wrapper)]).to_string()
    }
}

/// Parse one raw completion.
pub fn parse_predictions(raw: &str) -> ParseOutcome {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return ParseOutcome::unparseable(vec!["empty completion".into()]);
    }

    if let Ok(value) = parse_strict(trimmed) {
        if let Value::Array(_) = value {
            if let Some(extracted) = extract_links(&value) {
                if extracted.dropped.is_empty() {
                    return finish(extracted, ParseStatus::Clean, Vec::new());
                }
                let diagnostics = extracted.dropped.clone();
                return finish(extracted, ParseStatus::Repaired, diagnostics);
            }
        }
    }

    let mut diagnostics = Vec::new();
    let mut first_error = None;
    for (start, _) in trimmed.match_indices(['[', '{']) {
        let parsed = match parse_value_at(trimmed, start, true) {
            Ok(p) => p,
            Err(e) => {
                first_error.get_or_insert(e);
                continue;
            }
        };
        let Some(extracted) = extract_links(&parsed.value) else {
            continue;
        };
        if start > 0 || !trimmed[parsed.end..].trim().is_empty() {
            diagnostics.push("stripped surrounding text".to_string());
        }
        if matches!(parsed.value, Value::Object(_)) {
            diagnostics.push("accepted object without array wrapper".to_string());
        }
        if parsed.repairs.trailing_commas > 0 {
            diagnostics.push("removed trailing comma".to_string());
        }
        if parsed.repairs.closed_containers > 0 {
            diagnostics.push(format!(
                "closed {} unbalanced bracket(s)",
                parsed.repairs.closed_containers
            ));
        }
        diagnostics.extend(extracted.dropped.iter().cloned());
        return finish(extracted, ParseStatus::Repaired, diagnostics);
    }

    diagnostics.push(match first_error {
        Some(e) => format!("no entity structure found: {e}"),
        None => "no entity structure found".to_string(),
    });
    ParseOutcome::unparseable(diagnostics)
}

struct Extracted {
    pairs: Vec<(String, String)>,
    dropped: Vec<String>,
}

fn finish(extracted: Extracted, status: ParseStatus, diagnostics: Vec<String>) -> ParseOutcome {
    let origin = match status {
        ParseStatus::Clean => LinkOrigin::ParsedClean,
        _ => LinkOrigin::ParsedRepaired,
    };
    ParseOutcome {
        links: extracted
            .pairs
            .into_iter()
            .map(|(surface, title)| PredictedLink { surface, title, origin })
            .collect(),
        status,
        diagnostics,
    }
}

/// Pull the entity pairs out of an array of `{"Entities":{...}}` objects or
/// a single such object. Returns `None` when the shape does not match.
fn extract_links(value: &Value) -> Option<Extracted> {
    let holders: Vec<&Value> = match value {
        Value::Array(items) => items.iter().collect(),
        obj @ Value::Object(_) => vec![obj],
        _ => return None,
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut dropped = Vec::new();
    for holder in holders {
        let Value::Object(fields) = holder else {
            return None;
        };
        let entities = fields.iter().rev().find(|(k, _)| k == ENTITIES_KEY)?;
        let Value::Object(entries) = &entities.1 else {
            return None;
        };
        for (surface, title) in entries {
            let title = match title {
                Value::Str(t) => t,
                other => {
                    dropped.push(format!("dropped `{surface}`: non-string title {other:?}"));
                    continue;
                }
            };
            if surface.trim().is_empty() || title.trim().is_empty() {
                dropped.push(format!("dropped empty pair `{surface}` → `{title}`"));
                continue;
            }
            match pairs.iter_mut().find(|(s, _)| s == surface) {
                Some(existing) => existing.1 = title.clone(),
                None => pairs.push((surface.clone(), title.clone())),
            }
        }
    }
    Some(Extracted { pairs, dropped })
}
