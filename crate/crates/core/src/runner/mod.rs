//! Config-driven experiment runs: load a YAML config, build components,
//! run the pipeline over a dataset and persist traces, report and manifest.

pub mod build;
pub mod config;
pub mod index;
pub mod sweep;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{config_schema, load_config, parse_config, parse_config_value, ExperimentConfig};
pub use index::{build_index_dir, IndexKind, IndexSummary, BM25_INDEX_FILE, INDEX_META_FILE, VECTORS_FILE};
pub use sweep::{sweep, ComparisonRow, SweepOptions, SweepOutcome};

use crate::corpus::CorpusError;
use crate::dataspec::{filter_by_metadata, load_dataset, select, DatasetError, Item, SelectMode};
use crate::evaluate::{evaluate, Metric, MetricReport, RecallMode};
use crate::generate::GenerateError;
use crate::judge::JudgeError;
use crate::pipeline::{EventSink, ItemOutcome, Pipeline, PipelineError, PipelineTrace, TRACE_SCHEMA_VERSION};
use crate::refine::RefineError;
use crate::retrieval::RetrievalError;
use crate::sparse::IndexError;

pub const TRACES_FILE: &str = "traces.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error at `{path}`: {message}{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    Schema {
        path: String,
        message: String,
        suggestion: Option<String>,
    },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("unreachable services:\n  {}", .0.join("\n  "))]
    Preflight(Vec<String>),
    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(String),
    #[error("invalid sweep axis `{axis}`: {message}")]
    Axis { axis: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Command-line style overrides applied on top of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    pub sample: Option<usize>,
    pub seed: Option<u64>,
    /// Ad hoc items used instead of the configured dataset.
    pub items: Option<Vec<Item>>,
    pub run_id: Option<String>,
    /// Exact run directory, bypassing `output_dir/<run_id>`.
    pub out_dir: Option<PathBuf>,
    /// Skip service probing (used when the caller already did it).
    pub skip_preflight: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub split: String,
    pub item_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindTiming {
    pub count: usize,
    pub total_millis: f64,
    pub mean_millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub total_millis: f64,
    pub per_kind: BTreeMap<String, KindTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

/// Everything needed to re-execute a run against the same services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub ragforge_version: String,
    pub trace_schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Effective config: overrides applied, defaults filled, paths absolute.
    pub config: ExperimentConfig,
    /// Ad hoc items, when the run did not come from a dataset file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<Item>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInfo>,
    pub corpus_fingerprint: String,
    pub passage_count: usize,
    pub retriever_fingerprint: String,
    pub item_count: usize,
    pub error_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheStats>,
    pub timings: TimingSummary,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Io {
            path: path.display().to_string(),
            message: format!("malformed manifest: {e}"),
        })
    }

    /// Options that reproduce this run's item selection.
    pub fn replay_options(&self) -> RunOptions {
        RunOptions {
            items: self.items.clone(),
            ..RunOptions::default()
        }
    }
}

pub fn config_hash(cfg: &ExperimentConfig, items: Option<&[Item]>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    if let Some(items) = items {
        h.update(serde_json::to_vec(items).expect("items serialize"));
    }
    hex::encode(h.finalize())
}

pub fn make_run_id(hash: &str) -> String {
    format!("{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"), &hash[..8])
}

/// Applies overrides, loads and samples the dataset.
fn select_items(cfg: &mut ExperimentConfig, opts: &RunOptions) -> Result<(Vec<Item>, Option<DatasetInfo>), RunError> {
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(items) = &opts.items {
        let items = match opts.sample {
            Some(n) => items.iter().take(n).cloned().collect(),
            None => items.clone(),
        };
        return Ok((items, None));
    }
    let dref = cfg.dataset.as_mut().ok_or_else(|| RunError::Invalid {
        field: "dataset".into(),
        message: "required unless items are supplied directly".into(),
    })?;
    if let Some(n) = opts.sample {
        dref.sample = Some(n);
    }
    let mut ds = load_dataset(&dref.path, dref.split)?;
    if let Some(f) = &dref.filter {
        ds = filter_by_metadata(&ds, &f.key, |v| v == &f.equals);
    }
    if let Some(n) = dref.sample {
        if n < ds.items.len() {
            let mode = match dref.sample_mode {
                config::SampleMode::First => SelectMode::Sequential,
                config::SampleMode::Random => SelectMode::Random { seed: cfg.seed },
            };
            ds = select(&ds, mode, n)?;
        }
    }
    let info = DatasetInfo {
        name: ds.name.clone(),
        split: ds.split.as_str().to_string(),
        item_count: ds.items.len(),
    };
    Ok((ds.items, Some(info)))
}

/// A validated, fully built run waiting to execute.
pub struct PreparedRun {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub items: Vec<Item>,
    inline_items: bool,
    dataset: Option<DatasetInfo>,
    pipeline: Pipeline,
    built: build::Built,
}

pub fn prepare_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PreparedRun, RunError> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let (items, dataset) = select_items(&mut cfg, opts)?;
    if let Some(id) = &opts.run_id {
        cfg.run_id = Some(id.clone());
    }
    let inline = opts.items.is_some();
    let hash = config_hash(&cfg, inline.then_some(items.as_slice()));
    let run_id = cfg.run_id.clone().unwrap_or_else(|| make_run_id(&hash));
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.output_dir.join(&run_id));
    if out_dir.exists() && fs::read_dir(&out_dir).map_err(io_err(&out_dir))?.next().is_some() {
        if !opts.force {
            return Err(RunError::OutputExists(out_dir.display().to_string()));
        }
        fs::remove_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    }

    let plan = build::plan(&cfg)?;
    if !opts.skip_preflight {
        build::preflight(&plan.services)?;
    }
    let built = plan.assemble(&cfg)?;
    let pipeline = Pipeline::new(cfg.pipeline.clone(), built.components.clone())?;
    Ok(PreparedRun {
        run_id,
        out_dir,
        config_hash: hash,
        config: cfg,
        items,
        inline_items: inline,
        dataset,
        pipeline,
        built,
    })
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_traces(path: &Path, traces: &[PipelineTrace]) -> Result<(), RunError> {
    write_jsonl(path, traces)
}

pub fn load_traces(path: &Path) -> Result<Vec<PipelineTrace>, RunError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunError::Io {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_report(path: &Path) -> Result<MetricReport, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        message: format!("malformed report: {e}"),
    })
}

fn summarize_timings(outcomes: &[ItemOutcome], total_millis: f64) -> TimingSummary {
    let mut per_kind: BTreeMap<String, KindTiming> = BTreeMap::new();
    for t in outcomes.iter().flat_map(|o| &o.timings) {
        let e = per_kind.entry(t.kind.clone()).or_insert(KindTiming {
            count: 0,
            total_millis: 0.0,
            mean_millis: 0.0,
        });
        e.count += 1;
        e.total_millis += t.millis;
    }
    for k in per_kind.values_mut() {
        k.mean_millis = k.total_millis / k.count as f64;
    }
    TimingSummary { total_millis, per_kind }
}

#[derive(Serialize)]
struct TimingLine<'a> {
    item_id: &'a str,
    steps: &'a [crate::pipeline::StepTiming],
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub report: MetricReport,
    pub traces: Vec<PipelineTrace>,
    pub out_dir: PathBuf,
}

impl PreparedRun {
    pub fn passage_count(&self) -> usize {
        self.built.store.len()
    }

    pub fn execute(self, sink: Option<&dyn EventSink>) -> Result<RunResult, RunError> {
        let started = Instant::now();
        let outcomes = self.pipeline.run(&self.items, self.config.parallelism, sink);
        let total_millis = started.elapsed().as_secs_f64() * 1000.0;

        let dir = &self.out_dir;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let traces: Vec<PipelineTrace> = outcomes.iter().map(|o| o.trace.clone()).collect();
        write_traces(&dir.join(TRACES_FILE), &traces)?;
        let report = evaluate(
            &traces,
            &self.config.metrics,
            self.config.pipeline.top_k,
            self.config.recall_mode,
        );
        write_json(&dir.join(REPORT_FILE), &report)?;
        let csv = dir.join(REPORT_CSV_FILE);
        fs::write(&csv, report.aggregate_csv()).map_err(io_err(&csv))?;
        let timing_lines: Vec<TimingLine> = outcomes
            .iter()
            .map(|o| TimingLine {
                item_id: &o.trace.item_id,
                steps: &o.timings,
            })
            .collect();
        write_jsonl(&dir.join(TIMINGS_FILE), &timing_lines)?;

        let cache = match &self.built.cache {
            Some((cache, path)) => {
                cache.save(path)?;
                Some(CacheStats {
                    hits: cache.hits(),
                    misses: cache.misses(),
                    entries: cache.len(),
                })
            }
            None => None,
        };

        let manifest = RunManifest {
            run_id: self.run_id,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            ragforge_version: env!("CARGO_PKG_VERSION").to_string(),
            trace_schema_version: TRACE_SCHEMA_VERSION,
            config_hash: self.config_hash,
            seed: self.config.seed,
            items: self.inline_items.then(|| self.items.clone()),
            dataset: self.dataset,
            corpus_fingerprint: self.built.store.fingerprint().to_string(),
            passage_count: self.built.store.len(),
            retriever_fingerprint: self.built.retriever_fingerprint,
            item_count: traces.len(),
            error_count: report.errors.len(),
            cache,
            timings: summarize_timings(&outcomes, total_millis),
            files: [TRACES_FILE, REPORT_FILE, REPORT_CSV_FILE, TIMINGS_FILE, MANIFEST_FILE]
                .map(String::from)
                .to_vec(),
            config: self.config,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        log::info!(
            "run {} finished: {} items, {} errors, output in {}",
            manifest.run_id,
            manifest.item_count,
            manifest.error_count,
            dir.display()
        );
        Ok(RunResult {
            manifest,
            report,
            traces,
            out_dir: self.out_dir,
        })
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunResult, RunError> {
    prepare_run(cfg, opts)?.execute(None)
}

/// Re-scores a finished run directory. Unset arguments fall back to the
/// values recorded in its manifest.
pub fn evaluate_run(
    dir: &Path,
    metrics: Option<&[Metric]>,
    k: Option<usize>,
    mode: Option<RecallMode>,
) -> Result<MetricReport, RunError> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let traces = load_traces(&dir.join(TRACES_FILE))?;
    let cfg = &manifest.config;
    Ok(evaluate(
        &traces,
        metrics.unwrap_or(&cfg.metrics),
        k.unwrap_or(cfg.pipeline.top_k),
        mode.unwrap_or(cfg.recall_mode),
    ))
}

#[cfg(test)]
mod tests;
