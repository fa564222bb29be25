//! One-shot entity-linking prompt construction.
//!
//! Templates are plain text split into `%% <section>` blocks:
//!
//! ```text
//! %% version
//! one-shot-el/1
//! %% instruction
//! ...
//! %% shots
//! Here there are some examples:
//! %% shot
//! Sentence:"..."
//! Output:  [...]
//! %% target
//! Sentence:"{{sentence}}"
//! Output:
//! ```
//!
//! Any number of `%% shot` blocks may follow `%% shots`. Rendered shots and
//! the target are each preceded by a `#` separator line when at least one
//! shot is present.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const SENTENCE_SLOT: &str = "{{sentence}}";
const SHOT_SEPARATOR: &str = "#";

/// The packaged one-shot template.
pub const DEFAULT_TEMPLATE_TEXT: &str = include_str!("../assets/prompt_v1.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotExample {
    pub sentence: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub instruction: String,
    pub shots_header: String,
    pub shot_examples: Vec<ShotExample>,
    /// Target block; contains [`SENTENCE_SLOT`] exactly once.
    pub target: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE_TEXT).expect("packaged template is well formed")
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(usize, String, Vec<&str>)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("%% ") {
                sections.push((idx + 1, name.trim().to_string(), Vec::new()));
            } else if let Some(last) = sections.last_mut() {
                last.2.push(line);
            } else if !line.trim().is_empty() {
                return Err(PromptError::Malformed {
                    line: idx + 1,
                    message: "content before the first `%%` section".into(),
                });
            }
        }

        let mut version = None;
        let mut instruction = None;
        let mut shots_header = String::new();
        let mut shot_examples = Vec::new();
        let mut target = None;
        for (line, name, body) in sections {
            let joined = trim_trailing_blank(&body).join("\n");
            match name.as_str() {
                "version" => version = Some(joined.trim().to_string()),
                "instruction" => instruction = Some(joined),
                "shots" => shots_header = joined,
                "shot" => shot_examples.push(parse_shot(line, &body)?),
                "target" => {
                    if joined.matches(SENTENCE_SLOT).count() != 1 {
                        return Err(PromptError::Malformed {
                            line,
                            message: format!("target must contain {SENTENCE_SLOT} exactly once"),
                        });
                    }
                    target = Some(joined);
                }
                other => {
                    return Err(PromptError::Malformed {
                        line,
                        message: format!("unknown section `{other}`"),
                    })
                }
            }
        }
        let missing = |what: &str| PromptError::Malformed {
            line: 0,
            message: format!("missing `%% {what}` section"),
        };
        Ok(Self {
            version: version.ok_or_else(|| missing("version"))?,
            instruction: instruction.ok_or_else(|| missing("instruction"))?,
            shots_header,
            shot_examples,
            target: target.ok_or_else(|| missing("target"))?,
        })
    }

    /// Same template without examples.
    pub fn zero_shot(&self) -> Self {
        Self {
            shot_examples: Vec::new(),
            ..self.clone()
        }
    }
}

fn trim_trailing_blank<'a>(body: &'a [&'a str]) -> &'a [&'a str] {
    let end = body.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |i| i + 1);
    &body[..end]
}

fn parse_shot(line: usize, body: &[&str]) -> Result<ShotExample, PromptError> {
    let body = trim_trailing_blank(body);
    let bad = |message: &str| PromptError::Malformed {
        line,
        message: message.to_string(),
    };
    let [sentence_line, output_line] = body else {
        return Err(bad("a shot holds exactly one Sentence line and one Output line"));
    };
    let sentence = sentence_line
        .strip_prefix("Sentence:\"")
        .and_then(|s| s.strip_suffix('"'))
        .ok_or_else(|| bad("shot sentence must look like Sentence:\"...\""))?;
    let output = output_line
        .strip_prefix("Output:")
        .ok_or_else(|| bad("shot output must start with Output:"))?;
    Ok(ShotExample {
        sentence: sentence.to_string(),
        output: output.trim_start().to_string(),
    })
}

/// Render the prompt for one target sentence. The sentence is inserted
/// verbatim; quotes are not escaped.
pub fn build_prompt(template: &PromptTemplate, sentence: &str) -> String {
    let mut out = String::with_capacity(template.instruction.len() + 256 + sentence.len());
    out.push_str(&template.instruction);
    out.push('\n');
    if !template.shot_examples.is_empty() {
        if !template.shots_header.is_empty() {
            out.push_str(&template.shots_header);
            out.push('\n');
        }
        for shot in &template.shot_examples {
            out.push_str(SHOT_SEPARATOR);
            out.push('\n');
            out.push_str("Sentence:\"");
            out.push_str(&shot.sentence);
            out.push_str("\"\nOutput:  ");
            out.push_str(&shot.output);
            out.push('\n');
        }
        out.push_str(SHOT_SEPARATOR);
        out.push('\n');
    }
    out.push_str(&template.target.replacen(SENTENCE_SLOT, sentence, 1));
    out
}
