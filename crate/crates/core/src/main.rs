use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tailink::backend::{BackendConfig, BackendKind, WireFormat};
use tailink::benchmark::BenchmarkFormat;
use tailink::pipeline::{
    cmd_ingest, cmd_link, cmd_record, cmd_report, cmd_resolve, cmd_score, cmd_stratify, LinkOptions, ScoreOptions,
    StratifyOptions,
};
use tailink::popularity::{MissingCounts, Theta};
use tailink::scorer::{MatchMode, NilPolicy};

#[derive(Parser)]
#[command(
    name = "tailink",
    version,
    about = "Few-shot entity linking runs and popularity-stratified scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a benchmark and print its statistics.
    Ingest {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        format: Option<BenchmarkFormat>,
        /// Re-emit the benchmark as normalized JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt the model for every sentence and write parsed predictions.
    Link(LinkArgs),
    /// Attach QIDs to external linker output.
    Resolve {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one predictions file.
    Score {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score per popularity threshold.
    Stratify {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long)]
        counts: PathBuf,
        /// Comma-separated thresholds; `inf` for no limit.
        #[arg(long, default_value = "20,40,60,80,100,inf")]
        thetas: String,
        /// Treat entities without a count as unpopular instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Fetch missing counts from this Wikidata API into the counts file.
        #[arg(long)]
        fetch_from: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Merge score reports into a comparison table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        /// Allow reports with different match modes.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Build a replay fixture from a completion log.
    Record {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        format: Option<BenchmarkFormat>,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    format: Option<BenchmarkFormat>,
    #[arg(long)]
    template: Option<PathBuf>,
    /// `key = value` backend settings; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `http` or `replay`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    retry_delay_ms: Option<u64>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// `completions` or `chat`.
    #[arg(long)]
    wire: Option<String>,
    /// Replay fixture to append live completions to.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Exit nonzero if any sentence got no completion.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    format: Option<BenchmarkFormat>,
    #[arg(long)]
    predictions: PathBuf,
    /// Title/QID mapping; required for `--mode title`.
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long, default_value = "qid")]
    mode: MatchMode,
    #[arg(long, default_value = "exclude-gold-and-ignore-matching-preds")]
    nil_policy: NilPolicy,
    /// System name in reports; defaults to the predictions file stem.
    #[arg(long)]
    system: Option<String>,
}

impl ScoreArgs {
    fn into_options(self) -> ScoreOptions {
        ScoreOptions {
            benchmark: self.benchmark,
            format: self.format,
            predictions: self.predictions,
            mapping: self.mapping,
            mode: self.mode,
            nil_policy: self.nil_policy,
            system_id: self.system,
        }
    }
}

fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), i + 1);
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    file.get(key)
        .map(|v| v.parse::<T>().map_err(|e| anyhow::anyhow!("config `{key}`: {e}")))
        .transpose()
}

fn backend_config(a: &LinkArgs) -> Result<BackendConfig> {
    const KEYS: [&str; 12] = [
        "backend",
        "endpoint",
        "fixture",
        "model",
        "temperature",
        "max-tokens",
        "timeout",
        "retries",
        "retry-delay-ms",
        "api-key-env",
        "parallelism",
        "wire",
    ];
    let file = match &a.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    if let Some(k) = file.keys().find(|k| !KEYS.contains(&k.as_str())) {
        bail!("config: unknown key `{k}`");
    }
    let mut cfg = BackendConfig::default();
    let endpoint: Option<String> = pick(a.endpoint.clone(), &file, "endpoint")?;
    let fixture: Option<PathBuf> = pick(a.fixture.clone(), &file, "fixture")?;
    let kind: Option<String> = pick(a.backend.clone(), &file, "backend")?;
    cfg.kind = match kind.as_deref() {
        Some("http") => BackendKind::Http,
        Some("replay") => BackendKind::Replay,
        Some(other) => bail!("unknown backend `{other}` (expected http or replay)"),
        None if endpoint.is_some() => BackendKind::Http,
        None => BackendKind::Replay,
    };
    cfg.endpoint = endpoint;
    cfg.fixture = fixture;
    if let Some(m) = pick(a.model.clone(), &file, "model")? {
        cfg.model_id = m;
    }
    if let Some(t) = pick(a.temperature, &file, "temperature")? {
        cfg.temperature = t;
    }
    if let Some(t) = pick(a.max_tokens, &file, "max-tokens")? {
        cfg.max_output_tokens = t;
    }
    if let Some(t) = pick(a.timeout, &file, "timeout")? {
        cfg.request_timeout_secs = t;
    }
    if let Some(r) = pick(a.retries, &file, "retries")? {
        cfg.max_retries = r;
    }
    if let Some(d) = pick(a.retry_delay_ms, &file, "retry-delay-ms")? {
        cfg.retry_base_delay_ms = d;
    }
    if let Some(e) = pick(a.api_key_env.clone(), &file, "api-key-env")? {
        cfg.api_key_env = e;
    }
    if let Some(p) = pick(a.parallelism, &file, "parallelism")? {
        cfg.parallelism = p;
    }
    let wire: Option<String> = pick(a.wire.clone(), &file, "wire")?;
    cfg.wire = match wire.as_deref() {
        None | Some("completions") => WireFormat::Completions,
        Some("chat") => WireFormat::Chat,
        Some(other) => bail!("unknown wire format `{other}` (expected completions or chat)"),
    };
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { benchmark, format, out } => {
            let s = cmd_ingest(&benchmark, format, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Link(args) => {
            let opts = LinkOptions {
                benchmark: args.benchmark.clone(),
                format: args.format,
                template: args.template.clone(),
                backend: backend_config(&args)?,
                out: args.out.clone(),
                record: args.record.clone(),
                strict: args.strict,
            };
            let s = cmd_link(&opts)?;
            for (id, code) in &s.failures {
                eprintln!("warning: {id}: {code}");
            }
            eprintln!(
                "{} sentences: {} clean, {} repaired, {} unparseable, {} failed",
                s.records, s.clean, s.repaired, s.unparseable, s.failed
            );
        }
        Command::Resolve {
            predictions,
            mapping,
            out,
        } => {
            let c = cmd_resolve(&predictions, &mapping, &out)?;
            eprintln!(
                "{} rows, {} links, {} unresolved",
                c.input_rows,
                c.link_count(),
                c.resolution_failures
            );
        }
        Command::Score { score, out, csv } => {
            let r = cmd_score(&score.into_options(), &out, csv.as_deref())?;
            println!("{}\n{}", tailink::scorer::ScoreReport::CSV_HEADER, r.csv_row());
        }
        Command::Stratify {
            score,
            counts,
            thetas,
            lenient,
            fetch_from,
            out,
            json,
        } => {
            let opts = StratifyOptions {
                score: score.into_options(),
                counts,
                thetas: Theta::parse_list(&thetas).map_err(anyhow::Error::msg)?,
                missing: if lenient {
                    MissingCounts::Lenient
                } else {
                    MissingCounts::Strict
                },
                fetch_from,
            };
            let st = cmd_stratify(&opts, &out, json.as_deref())?;
            println!("{}", tailink::popularity::Stratification::CSV_HEADER);
            for row in st.csv_rows() {
                println!("{row}");
            }
        }
        Command::Report {
            scores,
            force,
            out,
            markdown,
        } => {
            let rows = cmd_report(&scores, force, &out, markdown.as_deref())?;
            print!("{}", tailink::pipeline::table_markdown(&rows));
        }
        Command::Record {
            benchmark,
            format,
            template,
            completions,
            model,
            out,
        } => {
            let n = cmd_record(&benchmark, format, template.as_deref(), &completions, &model, &out)?;
            eprintln!("wrote {n} fixture entries");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
