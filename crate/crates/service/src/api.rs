use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use ragforge_core::corpus::load_corpus;
use ragforge_core::evaluate::RecallMode;
use ragforge_core::runner::{
    build_index_dir, config_hash, config_schema, evaluate_run, load_traces, make_run_id, parse_config_value,
    prepare_run, IndexSummary, RunOptions, INDEX_META_FILE, REPORT_FILE, TRACES_FILE,
};
use ragforge_core::{Item, Metric, PipelineConfig, Topology};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::error::ApiError;
use crate::indexes::{Claim, IndexJob, IndexRegistry, IndexRequest};
use crate::runs::{RunEntry, RunHandle, RunSink, RunStatus, StepEvent};

/// Where the service keeps its artifacts and which corpora it offers.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Base for relative paths in submitted configs.
    pub data_dir: PathBuf,
    /// Run directories, one per run id, in the runner's layout.
    pub runs_dir: PathBuf,
    pub index_dir: PathBuf,
    pub corpora: BTreeMap<String, PathBuf>,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        Self {
            runs_dir: data_dir.join("runs"),
            index_dir: data_dir.join("indexes"),
            data_dir,
            corpora: BTreeMap::new(),
            cors_origin: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct CorpusInfo {
    pub name: String,
    pub path: PathBuf,
    pub passage_count: usize,
    pub fingerprint: String,
}

pub struct AppState {
    pub config: ServiceConfig,
    corpora: Vec<CorpusInfo>,
    runs: RwLock<BTreeMap<String, Arc<RunEntry>>>,
    indexes: IndexRegistry,
}

impl AppState {
    /// Loads the corpora and picks up runs and indexes already on disk.
    pub fn open(config: ServiceConfig) -> Result<Self, ragforge_core::RunError> {
        let mut corpora = Vec::new();
        for (name, path) in &config.corpora {
            let store = load_corpus(path)?;
            corpora.push(CorpusInfo {
                name: name.clone(),
                path: path.clone(),
                passage_count: store.len(),
                fingerprint: store.fingerprint().to_string(),
            });
        }
        let mut runs = BTreeMap::new();
        for dir in subdirs(&config.runs_dir) {
            if let Some(entry) = RunEntry::load(&dir) {
                runs.insert(entry.id.clone(), Arc::new(entry));
            }
        }
        let indexes = IndexRegistry::default();
        for dir in subdirs(&config.index_dir) {
            let Ok(text) = std::fs::read_to_string(dir.join(INDEX_META_FILE)) else {
                continue;
            };
            let Ok(summary) = serde_json::from_str::<IndexSummary>(&text) else {
                continue;
            };
            let Some(corpus) = corpora.iter().find(|c| c.fingerprint == summary.corpus_fingerprint) else {
                continue;
            };
            let id = dir.file_name().expect("subdir has a name").to_string_lossy().into_owned();
            if let Claim::Started(_) = indexes.claim(id.clone(), &corpus.name, dir.clone()) {
                indexes.complete(&id, Ok(summary));
            }
        }
        Ok(Self {
            config,
            corpora,
            runs: RwLock::new(runs),
            indexes,
        })
    }

    fn run(&self, id: &str) -> Result<Arc<RunEntry>, ApiError> {
        self.runs
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("run", id))
    }
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match &state.config.cors_origin {
        Some(origin) => match origin.parse() {
            Ok(o) => cors.allow_origin(AllowOrigin::exact(o)),
            Err(_) => {
                log::warn!("ignoring malformed CORS origin {origin:?}");
                cors.allow_origin(Any)
            }
        },
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/trace", get(run_trace))
        .route("/runs/{id}/report", get(run_report))
        .route("/corpora", get(list_corpora))
        .route("/indexes", post(create_index).get(list_indexes))
        .route("/indexes/{id}", get(get_index))
        .route("/pipelines", get(list_pipelines))
        .route("/evaluate", post(evaluate))
        .route("/schema", get(schemas))
        .layer(cors)
        .with_state(state)
}

// runs -----------------------------------------------------------------------

/// Body of `POST /runs`: a config plus either one question, explicit
/// items, or a dataset reference.
#[derive(Debug, Clone, Deserialize, Serialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    /// Experiment config, same schema as the runner's YAML files.
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// Gold answers for `question`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub golden_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[schemars(with = "Option<Vec<Value>>")]
    pub items: Option<Vec<Item>>,
    /// Replaces `config.dataset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

async fn create_run(
    State(state): State<Shared>,
    body: Result<Json<RunRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<RunHandle>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "body", e.body_text()))?;
    let mut raw = req.config;
    if !raw.is_object() {
        return Err(ApiError::bad_request("config", "must be an object"));
    }
    if let Some(d) = req.dataset {
        raw["dataset"] = d;
    }
    let cfg = parse_config_value(raw, &state.config.data_dir)?;
    let items = match (req.question, req.items) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("question", "give `question` or `items`, not both")),
        (Some(q), None) => Some(vec![Item::new("q0", q, req.golden_answers)]),
        (None, items) => items,
    };
    if items.is_none() && cfg.dataset.is_none() {
        return Err(ApiError::bad_request("dataset", "give a question, items or a dataset"));
    }

    let hash = config_hash(&cfg, items.as_deref());
    let entry = {
        let mut runs = state.runs.write().unwrap_or_else(|p| p.into_inner());
        let base = make_run_id(&hash);
        let mut id = base.clone();
        let mut n = 1;
        while runs.contains_key(&id) || state.config.runs_dir.join(&id).exists() {
            n += 1;
            id = format!("{base}-{n}");
        }
        let snapshot = serde_json::to_value(&cfg).expect("config serializes");
        let entry = Arc::new(RunEntry::new(id.clone(), state.config.runs_dir.join(&id), snapshot));
        runs.insert(id, entry.clone());
        entry
    };
    let opts = RunOptions {
        sample: req.sample,
        seed: req.seed,
        items,
        run_id: Some(entry.id.clone()),
        out_dir: Some(entry.dir.clone()),
        ..RunOptions::default()
    };
    let prepared = tokio::task::spawn_blocking(move || prepare_run(&cfg, &opts))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let prepared = match prepared {
        Ok(p) => p,
        Err(e) => {
            state.runs.write().unwrap_or_else(|p| p.into_inner()).remove(&entry.id);
            return Err(e.into());
        }
    };
    if let Err(e) = entry.start() {
        state.runs.write().unwrap_or_else(|p| p.into_inner()).remove(&entry.id);
        return Err(ApiError::internal(format!("{}: {e}", entry.dir.display())));
    }
    let handle = entry.handle();
    let worker = entry.clone();
    tokio::task::spawn_blocking(move || {
        let sink = RunSink(worker.clone());
        let result = prepared.execute(Some(&sink)).map(|_| ()).map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::error!("run {} failed: {e}", worker.id);
        }
        worker.finish(result);
    });
    Ok((StatusCode::ACCEPTED, Json(handle)))
}

async fn list_runs(State(state): State<Shared>) -> Json<Vec<RunHandle>> {
    let runs = state.runs.read().unwrap_or_else(|p| p.into_inner());
    Json(runs.values().map(|r| r.handle()).collect())
}

async fn get_run(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<RunHandle>, ApiError> {
    Ok(Json(state.run(&id)?.handle()))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    /// Resume after this sequence number, like `Last-Event-ID`.
    after: Option<u64>,
}

fn sse_event(ev: &StepEvent) -> Event {
    Event::default()
        .id(ev.seq.to_string())
        .event(ev.kind.clone())
        .json_data(ev)
        .expect("event serializes")
}

async fn run_events(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let entry = state.run(&id)?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let cursor = last_id.or(q.after).unwrap_or(0);
    let rx = entry.subscribe();
    let events = stream::unfold(
        (entry, cursor, rx, Vec::<StepEvent>::new().into_iter(), false),
        |(entry, mut cursor, mut rx, mut pending, mut closed)| async move {
            loop {
                if let Some(ev) = pending.next() {
                    cursor = ev.seq;
                    let out = sse_event(&ev);
                    return Some((Ok(out), (entry, cursor, rx, pending, closed)));
                }
                if closed {
                    return None;
                }
                rx.borrow_and_update();
                let (batch, terminal) = entry.events_after(cursor);
                if batch.is_empty() {
                    if terminal {
                        return None;
                    }
                    if rx.changed().await.is_err() {
                        closed = true;
                    }
                    continue;
                }
                closed = terminal;
                pending = batch.into_iter();
            }
        },
    );
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

fn require_done(entry: &RunEntry) -> Result<(), ApiError> {
    match entry.status() {
        RunStatus::Done => Ok(()),
        status => Err(ApiError {
            status: StatusCode::CONFLICT,
            body: json!({
                "error": "not_finished",
                "status": status,
                "message": format!("run `{}` is {}", entry.id, json!(status).as_str().unwrap_or("")),
            }),
        }),
    }
}

async fn run_trace(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    let entry = state.run(&id)?;
    require_done(&entry)?;
    let traces = load_traces(&entry.dir.join(TRACES_FILE))?;
    Ok(Json(traces))
}

async fn run_report(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let entry = state.run(&id)?;
    require_done(&entry)?;
    let path = entry.dir.join(REPORT_FILE);
    let text = tokio::fs::read_to_string(&path)
        .await
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map(Json).map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Debug, Clone, Deserialize, Serialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub run_id: String,
    /// Defaults to the run's configured metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[schemars(with = "Option<Vec<String>>")]
    pub metrics: Option<Vec<Metric>>,
    /// Retrieval cut-off; defaults to the run's `top_k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[schemars(with = "Option<String>")]
    pub recall_mode: Option<RecallMode>,
}

async fn evaluate(
    State(state): State<Shared>,
    body: Result<Json<EvaluateRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ragforge_core::MetricReport>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "body", e.body_text()))?;
    let entry = state.run(&req.run_id)?;
    require_done(&entry)?;
    let dir = entry.dir.clone();
    let report = tokio::task::spawn_blocking(move || {
        evaluate_run(&dir, req.metrics.as_deref(), req.k, req.recall_mode)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(report))
}

// corpora and indexes ----------------------------------------------------------

async fn list_corpora(State(state): State<Shared>) -> Json<Value> {
    let out: Vec<Value> = state
        .corpora
        .iter()
        .map(|c| {
            let indexes: Vec<IndexJob> = state.indexes.list().into_iter().filter(|j| j.corpus == c.name).collect();
            let mut v = serde_json::to_value(c).expect("corpus serializes");
            v["indexes"] = serde_json::to_value(indexes).expect("jobs serialize");
            v
        })
        .collect();
    Json(Value::Array(out))
}

async fn create_index(
    State(state): State<Shared>,
    body: Result<Json<IndexRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<IndexJob>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "body", e.body_text()))?;
    let corpus = state
        .corpora
        .iter()
        .find(|c| c.name == req.corpus)
        .cloned()
        .ok_or_else(|| ApiError::not_found("corpus", &req.corpus))?;
    let kind = match &req.index {
        ragforge_core::runner::IndexKind::Bm25 => "bm25",
        ragforge_core::runner::IndexKind::Dense { .. } => "dense",
    };
    let id = format!("{}-{kind}", corpus.name);
    let dir = state.config.index_dir.join(&id);
    let job = match state.indexes.claim(id.clone(), &corpus.name, dir.clone()) {
        Claim::Started(job) => job,
        Claim::Busy(job) => {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({
                    "error": "index_in_progress",
                    "index_id": job.index_id,
                    "status": job.status,
                    "message": format!("an index build for corpus `{}` is already running", corpus.name),
                }),
            })
        }
    };
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let result = build_index_dir(&req.index, &corpus.path, &dir).map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::error!("index {id} failed: {e}");
        }
        worker.indexes.complete(&id, result);
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn list_indexes(State(state): State<Shared>) -> Json<Vec<IndexJob>> {
    Json(state.indexes.list())
}

async fn get_index(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<IndexJob>, ApiError> {
    state
        .indexes
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("index", &id))
}

// registry and schemas ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct PipelineDescriptor {
    pub name: String,
    pub family: String,
    /// Parameters the topology reads, besides `top_k` and `generation`.
    pub parameters: Vec<String>,
    /// JSON Schema of the `pipeline` object restricted to those parameters.
    pub schema: Value,
}

pub fn pipeline_descriptors() -> Vec<PipelineDescriptor> {
    let full = serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes");
    let props = full["properties"].as_object().cloned().unwrap_or_default();
    Topology::REGISTERED
        .iter()
        .map(|t| {
            let mut keep = vec!["topology", "top_k", "generation", "prompt"];
            keep.extend(t.parameters());
            let properties: serde_json::Map<String, Value> = keep
                .iter()
                .filter_map(|k| props.get(*k).map(|v| (k.to_string(), v.clone())))
                .collect();
            let mut schema = json!({
                "type": "object",
                "properties": properties,
                "required": ["topology"],
            });
            schema["properties"]["topology"] = json!({ "const": t.as_str() });
            if let Some(defs) = full.get("$defs") {
                schema["$defs"] = defs.clone();
            }
            PipelineDescriptor {
                name: t.as_str().into(),
                family: t.family().into(),
                parameters: t.parameters().iter().map(|s| s.to_string()).collect(),
                schema,
            }
        })
        .collect()
}

async fn list_pipelines() -> Json<Vec<PipelineDescriptor>> {
    Json(pipeline_descriptors())
}

fn schema_of<T: JsonSchema>() -> Value {
    serde_json::to_value(schemars::schema_for!(T)).expect("schema serializes")
}

/// Every request and response schema the service speaks.
pub fn all_schemas() -> Value {
    json!({
        "experiment_config": config_schema(),
        "run_request": schema_of::<RunRequest>(),
        "run_handle": schema_of::<RunHandle>(),
        "step_event": schema_of::<StepEvent>(),
        "evaluate_request": schema_of::<EvaluateRequest>(),
        "index_request": schema_of::<IndexRequest>(),
        "index_job": schema_of::<IndexJob>(),
        "corpus": schema_of::<CorpusInfo>(),
        "pipeline_descriptor": schema_of::<PipelineDescriptor>(),
    })
}

async fn schemas() -> Json<Value> {
    Json(all_schemas())
}
