use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ragforge_core::corpus::{chunk_documents, load_documents, write_corpus, ChunkPolicy, ChunkUnit};
use ragforge_core::evaluate::RecallMode;
use ragforge_core::runner::{
    build_index_dir, config_schema, evaluate_run, load_config, run_experiment, sweep, IndexKind, RunOptions,
    SweepOptions,
};
use ragforge_core::{Metric, MetricReport};
use ragforge_service::{AppState, MockBackends, ServiceConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ragforge", version, about = "Modular RAG experiments: chunk, index, run, sweep, evaluate, serve")]
struct Cli {
    /// Log more (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a document JSONL file into a passage corpus.
    Chunk {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Unit::Sentences)]
        unit: Unit,
        #[arg(long)]
        size: usize,
        /// Defaults to `size` (no overlap).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a retrieval index for a corpus.
    Index {
        #[arg(long = "type", value_enum)]
        kind: IndexType,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embedding route for dense indexes; the built-in hash embedder when omitted.
        #[arg(long)]
        embedding_endpoint: Option<String>,
        #[arg(long, default_value = "mock")]
        model: String,
        #[arg(long, value_enum, default_value_t = DenseMetric::Cosine)]
        metric: DenseMetric,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
        #[arg(long, default_value = "")]
        query_prefix: String,
        #[arg(long, default_value = "")]
        passage_prefix: String,
    },
    /// Execute one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Exact output directory instead of `output_dir/<run id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Run a config once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted config path or a unique key name, e.g. `pipeline.top_k` or `top_k`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values (each read as JSON when it parses) or a JSON array.
        #[arg(long)]
        values: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score a finished run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated metric names; defaults to the run's own list.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        recall_mode: Option<Recall>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Base directory for relative paths in submitted configs.
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
        /// Defaults to `<data-dir>/runs`.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
        /// Defaults to `<data-dir>/indexes`.
        #[arg(long)]
        index_dir: Option<PathBuf>,
        /// Corpus offered under a name, as NAME=PATH. Repeatable.
        #[arg(long = "corpus", value_parser = parse_named_path)]
        corpora: Vec<(String, PathBuf)>,
        /// Allowed browser origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Serve deterministic OpenAI-compatible chat, embedding and rerank routes.
    MockServices {
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: SocketAddr,
    },
    /// Print the JSON Schema of experiment configs.
    Schema,
}

#[derive(clap::Args)]
struct Overrides {
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Evaluate only this many dataset items.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    Sentences,
    Words,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexType {
    Bm25,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenseMetric {
    Cosine,
    InnerProduct,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recall {
    AnswerPresence,
    GoldCoverage,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() {
        return Err("corpus name is empty".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_metric(s: &str) -> Result<Metric> {
    let s = s.trim();
    Metric::ALL
        .into_iter()
        .find(|m| m.key() == s)
        .or_else(|| serde_json::from_value(Value::String(s.to_string())).ok())
        .ok_or_else(|| {
            let names: Vec<&str> = Metric::ALL.iter().map(|m| m.key()).collect();
            anyhow!("unknown metric `{s}` (expected one of {})", names.join(", "))
        })
}

/// `1,3,5` or `["a","b"]`; scalars that are not JSON become strings.
fn parse_values(s: &str) -> Result<Vec<Value>> {
    let s = s.trim();
    if s.starts_with('[') {
        return serde_json::from_str(s).context("--values looks like a JSON array but does not parse");
    }
    let values: Vec<Value> = s
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if values.is_empty() {
        bail!("--values is empty");
    }
    Ok(values)
}

fn print_report(report: &MetricReport) {
    println!("items: {}  errors: {}", report.item_count, report.errors.len());
    for (k, v) in &report.aggregate {
        println!("  {k:<12} {v:.4}");
    }
}

fn chunk(input: &Path, unit: Unit, size: usize, stride: Option<usize>, output: &Path) -> Result<()> {
    let unit = match unit {
        Unit::Sentences => ChunkUnit::Sentences,
        Unit::Words => ChunkUnit::Words,
    };
    let policy = ChunkPolicy::new(unit, size, stride.unwrap_or(size))?;
    let docs = load_documents(input).with_context(|| format!("reading {}", input.display()))?;
    let passages = chunk_documents(&docs, &policy);
    write_corpus(output, &passages)?;
    println!("{} documents -> {} passages in {}", docs.len(), passages.len(), output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn index(
    kind: IndexType,
    corpus: &Path,
    out: &Path,
    endpoint: Option<String>,
    model: String,
    metric: DenseMetric,
    batch_size: usize,
    query_prefix: String,
    passage_prefix: String,
) -> Result<()> {
    let kind = match kind {
        IndexType::Bm25 => IndexKind::Bm25,
        IndexType::Dense => {
            let service = match endpoint {
                Some(e) => json!({ "type": "http", "endpoint": e }),
                None => json!({ "type": "mock" }),
            };
            let metric = match metric {
                DenseMetric::Cosine => "cosine",
                DenseMetric::InnerProduct => "inner_product",
            };
            serde_json::from_value(json!({
                "type": "dense",
                "embedding": {
                    "service": service,
                    "model": model,
                    "batch_size": batch_size,
                    "query_prefix": query_prefix,
                    "passage_prefix": passage_prefix,
                },
                "metric": metric,
            }))?
        }
    };
    let summary = build_index_dir(&kind, corpus, out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(config: &Path, o: Overrides, out: Option<PathBuf>, run_id: Option<String>) -> Result<()> {
    let cfg = load_config(config)?;
    let opts = RunOptions {
        force: o.force,
        sample: o.sample,
        seed: o.seed,
        out_dir: out,
        run_id,
        ..RunOptions::default()
    };
    let result = run_experiment(&cfg, &opts)?;
    println!("run {}", result.manifest.run_id);
    println!("output {}", result.out_dir.display());
    print_report(&result.report);
    Ok(())
}

fn sweep_cmd(config: &Path, axis: &str, values: &str, o: Overrides, parallel: bool, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let values = parse_values(values)?;
    let opts = SweepOptions {
        force: o.force,
        sample: o.sample,
        seed: o.seed,
        parallel,
        sweep_id: None,
        out_dir: out,
    };
    let outcome = sweep(&cfg, axis, &values, &opts)?;
    println!("sweep {} over {}", outcome.sweep_id, outcome.axis);
    println!("output {}", outcome.out_dir.display());
    print!("{}", outcome.to_csv());
    Ok(())
}

fn eval(run: &Path, metrics: Option<String>, k: Option<usize>, mode: Option<Recall>) -> Result<()> {
    let metrics = metrics
        .map(|m| m.split(',').filter(|s| !s.trim().is_empty()).map(parse_metric).collect::<Result<Vec<_>>>())
        .transpose()?;
    let mode = mode.map(|m| match m {
        Recall::AnswerPresence => RecallMode::AnswerPresence,
        Recall::GoldCoverage => RecallMode::GoldCoverage,
    });
    let report = evaluate_run(run, metrics.as_deref(), k, mode)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Chunk {
            input,
            unit,
            size,
            stride,
            output,
        } => chunk(&input, unit, size, stride, &output),
        Command::Index {
            kind,
            corpus,
            out,
            embedding_endpoint,
            model,
            metric,
            batch_size,
            query_prefix,
            passage_prefix,
        } => index(
            kind,
            &corpus,
            &out,
            embedding_endpoint,
            model,
            metric,
            batch_size,
            query_prefix,
            passage_prefix,
        ),
        Command::Run {
            config,
            overrides,
            out,
            run_id,
        } => run(&config, overrides, out, run_id),
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
            parallel,
            out,
        } => sweep_cmd(&config, &axis, &values, overrides, parallel, out),
        Command::Eval {
            run,
            metrics,
            k,
            recall_mode,
        } => eval(&run, metrics, k, recall_mode),
        Command::Serve {
            addr,
            data_dir,
            runs_dir,
            index_dir,
            corpora,
            cors_origin,
        } => {
            let mut cfg = ServiceConfig::new(&data_dir);
            if let Some(d) = runs_dir {
                cfg.runs_dir = d;
            }
            if let Some(d) = index_dir {
                cfg.index_dir = d;
            }
            cfg.corpora = corpora.into_iter().collect::<BTreeMap<_, _>>();
            cfg.cors_origin = cors_origin;
            let state = AppState::open(cfg)?;
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                println!("listening on http://{}", listener.local_addr()?);
                ragforge_service::serve_on(listener, state).await?;
                Ok(())
            })
        }
        Command::MockServices { addr } => runtime()?.block_on(async move {
            let listener = tokio::net::TcpListener::bind(addr).await?;
            println!("mock services on http://{}", listener.local_addr()?);
            ragforge_service::serve_mock_on(listener, MockBackends::default()).await?;
            Ok(())
        }),
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&config_schema())?);
            Ok(())
        }
    }
}
