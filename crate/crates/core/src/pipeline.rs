//! End-to-end commands: link, resolve, score, stratify, report, ingest and
//! record. Each reads and writes files only, so the CLI stays a thin layer
//! over these functions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    batch_complete, open_backend, text_digest, Backend, BackendConfig, BackendError, BackendKind, FixtureEntry,
    HttpBackend, Recorder,
};
use crate::baseline::{load_external_predictions, BaselineConversion, BaselineError};
use crate::benchmark::{benchmark_stats, load_benchmark, Benchmark, BenchmarkError, BenchmarkFormat, StatsSummary};
use crate::kb::{load_mapping, MappingError, MappingIndex};
use crate::manifest::{current_timestamp, file_digest, RunManifest};
use crate::parser::parse_predictions;
use crate::popularity::{
    fetch_counts, load_counts, stratify, CountsFetchConfig, MissingCounts, PopularityError, Stratification, Theta,
};
use crate::predictions::{read_predictions, write_predictions, PredictionRecord, PredictionsError, RecordStatus};
use crate::prompt::{build_prompt, PromptError, PromptTemplate};
use crate::scorer::{csv_field, score, MatchConfig, MatchMode, NilPolicy, ScoreError, ScoreReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Predictions(#[from] PredictionsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Popularity(#[from] PopularityError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    BadInput { path: String, message: String },
    #[error("score files mix match modes ({0}); pass --force to merge anyway")]
    MixedModes(String),
    #[error("{failed} of {total} sentences got no completion")]
    LinkFailures { failed: usize, total: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn load_bench(path: &Path, format: Option<BenchmarkFormat>) -> Result<Benchmark, PipelineError> {
    let format = format.unwrap_or_else(|| BenchmarkFormat::from_path(path));
    Ok(load_benchmark(path, format)?)
}

fn load_template(path: Option<&Path>) -> Result<PromptTemplate, PipelineError> {
    Ok(match path {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    })
}

/// Companion log of raw completions written next to a predictions file.
pub fn completions_log_path(predictions: &Path) -> PathBuf {
    let mut name = predictions.as_os_str().to_owned();
    name.push(".completions.jsonl");
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionLogEntry {
    pub sentence_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LinkOptions {
    pub benchmark: PathBuf,
    pub format: Option<BenchmarkFormat>,
    pub template: Option<PathBuf>,
    pub backend: BackendConfig,
    pub out: PathBuf,
    /// Replay fixture that live completions are appended to. Defaults to
    /// `<out>.replay.jsonl` for HTTP backends.
    pub record: Option<PathBuf>,
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkSummary {
    pub records: usize,
    pub clean: usize,
    pub repaired: usize,
    pub unparseable: usize,
    pub failed: usize,
    /// `(sentence_id, error code)` for each backend failure.
    pub failures: Vec<(String, String)>,
}

/// Prompt every benchmark sentence, parse the completions and write the
/// predictions file, its manifest and the raw completion log.
pub fn cmd_link(opts: &LinkOptions) -> Result<LinkSummary, PipelineError> {
    let bench = load_bench(&opts.benchmark, opts.format)?;
    let template = load_template(opts.template.as_deref())?;
    opts.backend.validate()?;
    let backend: Box<dyn Backend> = match opts.backend.kind {
        BackendKind::Http => {
            let record = opts
                .record
                .clone()
                .unwrap_or_else(|| with_suffix(&opts.out, ".replay.jsonl"));
            Box::new(Recorder::new(HttpBackend::new(opts.backend.clone())?, &record)?)
        }
        BackendKind::Replay => open_backend(&opts.backend)?,
    };

    let prompts: Vec<String> = bench
        .sentences
        .iter()
        .map(|s| build_prompt(&template, &s.text))
        .collect();
    let results = batch_complete(backend.as_ref(), &prompts, opts.backend.parallelism);

    let mut summary = LinkSummary::default();
    let mut fatal = None;
    let mut records = Vec::with_capacity(results.len());
    let mut log = String::new();
    for ((sentence, prompt), result) in bench.sentences.iter().zip(&prompts).zip(results) {
        let id = &sentence.sentence_id;
        let (record, entry) = match result {
            Ok(c) => {
                let outcome = parse_predictions(&c.raw_text);
                (
                    PredictionRecord::from_outcome(id, &outcome),
                    CompletionLogEntry {
                        sentence_id: id.clone(),
                        prompt_digest: Some(c.prompt_digest),
                        text_digest: Some(c.text_digest),
                        raw_text: Some(c.raw_text),
                        model_id: Some(c.backend_meta.model_id),
                        error: None,
                    },
                )
            }
            Err(e) => {
                if e.is_fatal() && fatal.is_none() {
                    fatal = Some(e.clone());
                }
                summary.failures.push((id.clone(), e.code().to_string()));
                (
                    PredictionRecord::failed(id, format!("{}: {e}", e.code())),
                    CompletionLogEntry {
                        sentence_id: id.clone(),
                        prompt_digest: Some(text_digest(prompt)),
                        raw_text: None,
                        text_digest: None,
                        model_id: None,
                        error: Some(e.to_string()),
                    },
                )
            }
        };
        match record.status {
            RecordStatus::Clean => summary.clean += 1,
            RecordStatus::Repaired => summary.repaired += 1,
            RecordStatus::Unparseable => summary.unparseable += 1,
            RecordStatus::Failed => summary.failed += 1,
        }
        log.push_str(&serde_json::to_string(&entry).expect("log entry serializes"));
        log.push('\n');
        records.push(record);
    }
    summary.records = records.len();

    write_predictions(&opts.out, &records).map_err(io_err(&opts.out))?;
    let log_path = completions_log_path(&opts.out);
    write_file(&log_path, &log)?;
    let manifest = RunManifest {
        benchmark_path: Some(opts.benchmark.display().to_string()),
        benchmark_digest: Some(file_digest(&opts.benchmark).map_err(io_err(&opts.benchmark))?),
        template_version: Some(template.version.clone()),
        backend_config_digest: Some(opts.backend.digest()),
        ..RunManifest::now()
    };
    manifest.write_sidecar(&opts.out).map_err(io_err(&opts.out))?;

    if let Some(e) = fatal {
        return Err(e.into());
    }
    if opts.strict && summary.failed > 0 {
        return Err(PipelineError::LinkFailures {
            failed: summary.failed,
            total: summary.records,
        });
    }
    Ok(summary)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Convert external linker output into predictions with QIDs.
pub fn cmd_resolve(external: &Path, mapping: &Path, out: &Path) -> Result<BaselineConversion, PipelineError> {
    let idx = load_mapping(mapping)?;
    let conv = load_external_predictions(external, &idx)?;
    write_predictions(out, &conv.records).map_err(io_err(out))?;
    let manifest = RunManifest {
        kb_snapshot_digest: Some(idx.snapshot_digest().to_string()),
        ..RunManifest::now()
    };
    manifest.write_sidecar(out).map_err(io_err(out))?;
    Ok(conv)
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub benchmark: PathBuf,
    pub format: Option<BenchmarkFormat>,
    pub predictions: PathBuf,
    pub mapping: Option<PathBuf>,
    pub mode: MatchMode,
    pub nil_policy: NilPolicy,
    pub system_id: Option<String>,
}

impl ScoreOptions {
    fn system(&self) -> String {
        self.system_id.clone().unwrap_or_else(|| {
            let name = self
                .predictions
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("system");
            name.strip_suffix(".jsonl").unwrap_or(name).to_string()
        })
    }
}

struct ScoreInputs {
    bench: Benchmark,
    preds: Vec<PredictionRecord>,
    kb: Option<MappingIndex>,
    manifest: RunManifest,
}

fn score_inputs(opts: &ScoreOptions) -> Result<ScoreInputs, PipelineError> {
    let bench = load_bench(&opts.benchmark, opts.format)?;
    let preds = read_predictions(&opts.predictions)?;
    let kb = opts.mapping.as_deref().map(load_mapping).transpose()?;
    let upstream = RunManifest::read_sidecar(&opts.predictions).unwrap_or_default();
    let manifest = RunManifest {
        benchmark_path: Some(opts.benchmark.display().to_string()),
        benchmark_digest: Some(file_digest(&opts.benchmark).map_err(io_err(&opts.benchmark))?),
        kb_snapshot_digest: kb
            .as_ref()
            .map(|k| k.snapshot_digest().to_string())
            .or(upstream.kb_snapshot_digest.clone()),
        timestamp: current_timestamp(),
        ..upstream
    };
    Ok(ScoreInputs {
        bench,
        preds,
        kb,
        manifest,
    })
}

/// Score one predictions file; writes the JSON report and optionally a
/// one-row CSV.
pub fn cmd_score(opts: &ScoreOptions, out_json: &Path, out_csv: Option<&Path>) -> Result<ScoreReport, PipelineError> {
    let inputs = score_inputs(opts)?;
    let cfg = MatchConfig {
        mode: opts.mode,
        nil_policy: opts.nil_policy,
    };
    let mut report = score(&opts.system(), &inputs.bench, &inputs.preds, &cfg, inputs.kb.as_ref())?;
    report.manifest = Some(inputs.manifest);
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(out_json, &json)?;
    if let Some(csv) = out_csv {
        write_file(csv, &format!("{}\n{}\n", ScoreReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct StratifyOptions {
    pub score: ScoreOptions,
    pub counts: PathBuf,
    pub thetas: Vec<Theta>,
    pub missing: MissingCounts,
    /// Fetch absent counts from this Wikidata API into the counts file.
    pub fetch_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifyArtifact {
    pub manifest: RunManifest,
    #[serde(flatten)]
    pub stratification: Stratification,
}

pub fn cmd_stratify(
    opts: &StratifyOptions,
    out_csv: &Path,
    out_json: Option<&Path>,
) -> Result<Stratification, PipelineError> {
    let inputs = score_inputs(&opts.score)?;
    let cfg = MatchConfig {
        mode: opts.score.mode,
        nil_policy: opts.score.nil_policy,
    };
    let pop = match &opts.fetch_from {
        Some(api) => {
            let qids: Vec<_> = inputs
                .bench
                .sentences
                .iter()
                .flat_map(|s| &s.mentions)
                .filter_map(|m| crate::kb::Qid::parse(&m.qid))
                .chain(inputs.preds.iter().flat_map(|r| &r.links).filter_map(|l| l.qid.clone()))
                .collect();
            let fetch_cfg = CountsFetchConfig {
                wikidata_api: api.clone(),
                ..CountsFetchConfig::new(&opts.counts)
            };
            fetch_counts(&fetch_cfg, &qids)?
        }
        None => load_counts(&opts.counts)?,
    };
    let st = stratify(
        &opts.score.system(),
        &inputs.bench,
        &inputs.preds,
        &cfg,
        inputs.kb.as_ref(),
        &pop,
        &opts.thetas,
        opts.missing,
    )?;
    let mut csv = String::from(Stratification::CSV_HEADER);
    csv.push('\n');
    for row in st.csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_file(out_csv, &csv)?;
    if let Some(path) = out_json {
        let artifact = StratifyArtifact {
            manifest: RunManifest {
                counts_snapshot_digest: Some(pop.snapshot_digest().to_string()),
                ..inputs.manifest
            },
            stratification: st.clone(),
        };
        let mut json = serde_json::to_string_pretty(&artifact).expect("artifact serializes");
        json.push('\n');
        write_file(path, &json)?;
    }
    Ok(st)
}

/// Sort reports by F1 (descending, ties by system name).
pub fn comparison_table(mut reports: Vec<ScoreReport>, force: bool) -> Result<Vec<ScoreReport>, PipelineError> {
    let mut modes: Vec<String> = reports.iter().map(|r| r.mode.to_string()).collect();
    modes.sort();
    modes.dedup();
    if modes.len() > 1 && !force {
        return Err(PipelineError::MixedModes(modes.join(", ")));
    }
    reports.sort_by(|a, b| {
        b.f1.partial_cmp(&a.f1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.system_id.cmp(&b.system_id))
    });
    Ok(reports)
}

pub fn table_csv(rows: &[ScoreReport]) -> String {
    let mut out = String::from("system,precision,recall,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.1},{:.1},{:.1}\n",
            csv_field(&r.system_id),
            r.precision_pct(),
            r.recall_pct(),
            r.f1_pct()
        ));
    }
    out
}

pub fn table_markdown(rows: &[ScoreReport]) -> String {
    let mut out = String::from("| Model | Precision(%) | Recall(%) | F1(%) |\n|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} |\n",
            r.system_id,
            r.precision_pct(),
            r.recall_pct(),
            r.f1_pct()
        ));
    }
    out
}

/// Merge score reports into one comparison table.
pub fn cmd_report(
    scores: &[PathBuf],
    force: bool,
    out_csv: &Path,
    out_markdown: Option<&Path>,
) -> Result<Vec<ScoreReport>, PipelineError> {
    let mut reports = Vec::with_capacity(scores.len());
    for path in scores {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let report: ScoreReport = serde_json::from_str(&text).map_err(|e| PipelineError::BadInput {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        reports.push(report);
    }
    let rows = comparison_table(reports, force)?;
    write_file(out_csv, &table_csv(&rows))?;
    if let Some(md) = out_markdown {
        write_file(md, &table_markdown(&rows))?;
    }
    Ok(rows)
}

/// Validate a benchmark, optionally re-emitting it as JSONL.
pub fn cmd_ingest(
    path: &Path,
    format: Option<BenchmarkFormat>,
    out: Option<&Path>,
) -> Result<StatsSummary, PipelineError> {
    let bench = load_bench(path, format)?;
    if let Some(out) = out {
        write_file(out, &bench.to_jsonl())?;
    }
    Ok(benchmark_stats(&bench))
}

/// Turn a completion log (`{sentence_id, raw_text}` lines) into a replay
/// fixture for `benchmark` rendered with `template`. Returns the number of
/// fixture entries written.
pub fn cmd_record(
    benchmark: &Path,
    format: Option<BenchmarkFormat>,
    template: Option<&Path>,
    completions: &Path,
    model_id: &str,
    out: &Path,
) -> Result<usize, PipelineError> {
    let bench = load_bench(benchmark, format)?;
    let template = load_template(template)?;
    let text = fs::read_to_string(completions).map_err(io_err(completions))?;
    let mut fixture = String::new();
    let mut written = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PipelineError::BadInput {
            path: format!("{}:{}", completions.display(), i + 1),
            message,
        };
        let entry: CompletionLogEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let Some(raw) = entry.raw_text.as_deref() else {
            continue;
        };
        let sentence = bench
            .sentence(&entry.sentence_id)
            .ok_or_else(|| bad(format!("unknown sentence `{}`", entry.sentence_id)))?;
        let prompt = build_prompt(&template, &sentence.text);
        if let Some(d) = &entry.prompt_digest {
            if *d != text_digest(&prompt) {
                return Err(bad(
                    "prompt digest differs from the rendered prompt (template mismatch?)".into(),
                ));
            }
        }
        let fe = FixtureEntry::new(&prompt, raw, entry.model_id.as_deref().unwrap_or(model_id));
        fixture.push_str(&serde_json::to_string(&fe).expect("fixture entry serializes"));
        fixture.push('\n');
        written += 1;
    }
    write_file(out, &fixture)?;
    Ok(written)
}
