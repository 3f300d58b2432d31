use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use futures_util::StreamExt;
use ragforge_core::dense::{EmbeddingBackend, HttpEmbeddingBackend};
use ragforge_core::generate::{GenerationParams, Message, OpenAiChatClient, OpenAiChatConfig, Role};
use ragforge_core::mock::{mock_rerank_scores, mock_tokenize, HashEmbedder, MockGenerator, ScriptedGenerator, ScriptedReply};
use ragforge_core::retrieval::{CrossEncoderReranker, Reranker, RetrievalError};
use ragforge_core::runner::{load_traces, REPORT_FILE, TRACES_FILE};
use ragforge_core::transport::HttpSettings;
use ragforge_core::{Generator, PipelineTrace, RetrievedPassage, Step};
use ragforge_service::{mock_router, router, traces_from_events, AppState, MockBackends, ServiceConfig, StepEvent};
use reqwest::StatusCode;
use serde_json::{json, Value};

fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy")
}

async fn spawn(app: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

struct Server {
    url: String,
    http: reqwest::Client,
    _dir: tempfile::TempDir,
    config: ServiceConfig,
}

fn service_config(dir: &std::path::Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(toy());
    cfg.runs_dir = dir.join("runs");
    cfg.index_dir = dir.join("indexes");
    cfg.corpora = BTreeMap::from([("toy".to_string(), toy().join("corpus.jsonl"))]);
    cfg
}

async fn server() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let config = service_config(dir.path());
    let state = AppState::open(config.clone()).unwrap();
    Server {
        url: spawn(router(Arc::new(state))).await,
        http: reqwest::Client::new(),
        _dir: dir,
        config,
    }
}

fn base_config(topology: &str) -> Value {
    json!({
        "corpus": { "path": "corpus.jsonl" },
        "retriever": { "type": "bm25" },
        "generator": { "type": "mock" },
        "pipeline": { "topology": topology },
        "seed": 42,
    })
}

fn http_generator(url: &str) -> Value {
    json!({
        "type": "openai",
        "http": { "endpoint": format!("{url}/v1/chat/completions"), "max_retries": 0 },
        "model": "scripted",
        "capabilities": { "supports_logprobs": true, "supports_scoring": true },
    })
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self.http.post(format!("{}{path}", self.url)).json(&body).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.http.get(format!("{}{path}", self.url)).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn start(&self, body: Value) -> String {
        let (status, handle) = self.post("/runs", body).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{handle}");
        handle["run_id"].as_str().unwrap().to_string()
    }

    /// Reads the whole stream; it closes after the terminal event.
    async fn events(&self, run_id: &str, last_event_id: Option<u64>) -> Vec<StepEvent> {
        let mut req = self.http.get(format!("{}/runs/{run_id}/events", self.url));
        if let Some(id) = last_event_id {
            req = req.header("Last-Event-ID", id.to_string());
        }
        let text = tokio::time::timeout(Duration::from_secs(30), async { req.send().await.unwrap().text().await.unwrap() })
            .await
            .expect("stream closes");
        parse_sse(&text)
    }
}

/// Parses `id`/`event`/`data` frames and checks they agree with the payload.
fn parse_sse(text: &str) -> Vec<StepEvent> {
    let mut out = Vec::new();
    for frame in text.split("\n\n") {
        let mut id = None;
        let mut kind = None;
        let mut data = String::new();
        for line in frame.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse::<u64>().unwrap());
            } else if let Some(v) = line.strip_prefix("event:") {
                kind = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.strip_prefix(' ').unwrap_or(v));
            }
        }
        if data.is_empty() {
            continue;
        }
        let ev: StepEvent = serde_json::from_str(&data).unwrap();
        assert_eq!(Some(ev.seq), id);
        assert_eq!(Some(ev.kind.clone()), kind);
        out.push(ev);
    }
    out
}

fn kinds(events: &[StepEvent]) -> Vec<&str> {
    events.iter().map(|e| e.kind.as_str()).collect()
}

fn assert_contiguous(events: &[StepEvent], first: u64) {
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, first + i as u64, "{:?}", kinds(events));
    }
}

async fn wait_done(s: &Server, run_id: &str) -> Value {
    for _ in 0..600 {
        let (_, h) = s.get(&format!("/runs/{run_id}")).await;
        if h["status"] == "done" || h["status"] == "failed" {
            return h;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("run {run_id} did not finish");
}

/// Blocks callers until opened.
#[derive(Clone, Default)]
struct Gate(Arc<(Mutex<bool>, Condvar)>);

impl Gate {
    fn wait(&self) {
        let (m, c) = &*self.0;
        let mut open = m.lock().unwrap();
        while !*open {
            open = c.wait(open).unwrap();
        }
    }

    fn open(&self) {
        let (m, c) = &*self.0;
        *m.lock().unwrap() = true;
        c.notify_all();
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn single_question_streams_the_sequential_steps() {
    let s = server().await;
    let (status, handle) = s
        .post("/runs", json!({ "config": base_config("sequential"), "question": "What is the capital of Eskara?" }))
        .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(handle["status"], "running");
    assert_eq!(handle["config"]["pipeline"]["top_k"], 5);
    let id = handle["run_id"].as_str().unwrap();

    let events = s.events(id, None).await;
    assert_eq!(kinds(&events), ["retrieve", "prompt", "generate", "final", "end"]);
    assert_contiguous(&events, 1);
    assert!(events.iter().all(|e| e.run_id == id));
    assert_eq!(events[4].payload["status"], "done");

    let (status, traces) = s.get(&format!("/runs/{id}/trace")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(traces[0]["final_answer"], events[3].payload["final_answer"]);
    assert_eq!(wait_done(&s, id).await["cursor"], 5);
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_configs_are_rejected_with_the_field() {
    let s = server().await;
    let mut cfg = base_config("flare");
    cfg["pipeline"]["flare_theta"] = json!(1.5);
    let (status, body) = s.post("/runs", json!({ "config": cfg, "question": "q" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "pipeline.flare_theta");

    let mut cfg = base_config("sequential");
    cfg["pipeline"]["top_kk"] = json!(3);
    let (status, body) = s.post("/runs", json!({ "config": cfg, "question": "q" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "schema");
    assert_eq!(body["suggestion"], "top_k");

    let (status, body) = s.post("/runs", json!({ "config": base_config("sequential") })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "dataset");

    let (status, _) = s.post("/runs", json!({ "question": "q" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(s.get("/runs").await.1, json!([]));
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_services_give_503() {
    let s = server().await;
    let mut cfg = base_config("sequential");
    cfg["generator"] = http_generator("http://127.0.0.1:9");
    let (status, body) = s.post("/runs", json!({ "config": cfg, "question": "q" })).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "preflight");
    assert!(body["failures"][0].as_str().unwrap().starts_with("generator"), "{body}");
}

#[tokio::test(flavor = "multi_thread")]
async fn dataset_runs_replay_to_the_persisted_trace() {
    let s = server().await;
    let id = s
        .start(json!({ "config": base_config("sequential"), "dataset": { "path": "dataset.jsonl" } }))
        .await;
    let events = s.events(&id, None).await;
    assert_contiguous(&events, 1);
    assert_eq!(kinds(&events).iter().filter(|k| **k == "final").count(), 10);
    assert_eq!(events.last().unwrap().kind, "end");

    let dir = s.config.runs_dir.join(&id);
    let persisted = load_traces(&dir.join(TRACES_FILE)).unwrap();
    let mut replayed = traces_from_events(&events).unwrap();
    // Items run in parallel; the persisted file is in input order.
    let order: Vec<&str> = persisted.iter().map(|t| t.item_id.as_str()).collect();
    replayed.sort_by_key(|t| order.iter().position(|o| *o == t.item_id));
    assert_eq!(replayed, persisted);

    let (status, served): (_, Vec<PipelineTrace>) = {
        let (st, v) = s.get(&format!("/runs/{id}/trace")).await;
        (st, serde_json::from_value(v).unwrap())
    };
    assert_eq!(status, StatusCode::OK);
    assert_eq!(served, persisted);

    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(s.get(&format!("/runs/{id}/report")).await.1, on_disk);
    let (status, evaluated) = s.post("/evaluate", json!({ "run_id": id })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(evaluated, on_disk);

    let (_, narrowed) = s.post("/evaluate", json!({ "run_id": id, "metrics": ["em"], "k": 1 })).await;
    assert_eq!(narrowed["retrieval_k"], 1);
    assert!(narrowed["aggregate"].get("f1").is_none(), "{narrowed}");
}

#[tokio::test(flavor = "multi_thread")]
async fn reconnecting_resumes_after_the_last_event_id() {
    let gate = Gate::default();
    let g = gate.clone();
    let scripted = ScriptedGenerator::new(move |_, _| {
        g.wait();
        ScriptedReply::text("Ardent")
    });
    let mock = spawn(mock_router(MockBackends::default().with_generator(Arc::new(scripted)))).await;
    let s = server().await;
    let mut cfg = base_config("sequential");
    cfg["generator"] = http_generator(&mock);
    let id = s.start(json!({ "config": cfg, "question": "What is the capital of Eskara?" })).await;

    // Read up to the prompt, then drop the connection mid-run.
    let resp = s.http.get(format!("{}/runs/{id}/events", s.url)).send().await.unwrap();
    let mut body = resp.bytes_stream();
    let mut seen = String::new();
    while parse_sse(&seen).len() < 2 {
        let chunk = tokio::time::timeout(Duration::from_secs(10), body.next()).await.unwrap().unwrap().unwrap();
        seen.push_str(std::str::from_utf8(&chunk).unwrap());
    }
    drop(body);
    let first = parse_sse(&seen);
    assert_eq!(kinds(&first), ["retrieve", "prompt"]);

    // Nothing past the prompt can be read while generation is blocked.
    let (status, body) = s.get(&format!("/runs/{id}/trace")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["status"], "running");
    assert_eq!(s.get(&format!("/runs/{id}/report")).await.0, StatusCode::CONFLICT);
    assert_eq!(s.post("/evaluate", json!({ "run_id": id })).await.0, StatusCode::CONFLICT);

    gate.open();
    let rest = s.events(&id, Some(first.last().unwrap().seq)).await;
    assert_eq!(kinds(&rest), ["generate", "final", "end"]);
    assert_contiguous(&rest, 3);

    let all = s.events(&id, None).await;
    assert_eq!(all, [first, rest].concat());
    let after = s
        .http
        .get(format!("{}/runs/{id}/events?after=4", s.url))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert_eq!(kinds(&parse_sse(&after)), ["end"]);
    assert_eq!(s.get(&format!("/runs/{id}/trace")).await.0, StatusCode::OK);
}

/// Two sentences; each continuation is whatever the partial answer lacks.
fn two_sentence_generator() -> ScriptedGenerator {
    ScriptedGenerator::new(|m: &[Message], _: &GenerationParams| {
        let partial = m
            .iter()
            .find(|x| x.role == Role::Assistant)
            .map(|x| x.content.clone())
            .unwrap_or_default();
        let full = "Alpha beta gamma. Delta epsilon zeta.";
        let rest = full.strip_prefix(partial.as_str()).unwrap_or("").to_string();
        let n = mock_tokenize(&rest).len();
        ScriptedReply::with_probs(rest, vec![0.9; n])
    })
}

#[tokio::test(flavor = "multi_thread")]
async fn flare_triggers_show_up_as_retrieve_events() {
    let mock = spawn(mock_router(MockBackends::default().with_generator(Arc::new(two_sentence_generator())))).await;
    let s = server().await;
    let mut cfg = base_config("flare");
    cfg["generator"] = http_generator(&mock);
    // Every token is below theta = 1, so both sentences trigger.
    cfg["pipeline"]["flare_theta"] = json!(1.0);
    let id = s.start(json!({ "config": cfg, "question": "Tell me about Eskara." })).await;
    let events = s.events(&id, None).await;

    let traces = load_traces(&s.config.runs_dir.join(&id).join(TRACES_FILE)).unwrap();
    let expected = traces[0]
        .flat_steps()
        .iter()
        .filter(|st| matches!(st, Step::Retrieve { .. }))
        .count();
    assert_eq!(expected, 2);
    let k = kinds(&events);
    let first_prompt = k.iter().position(|x| *x == "prompt").unwrap();
    assert_eq!(k[first_prompt..].iter().filter(|x| **x == "retrieve").count(), expected);
    assert!(!k[..first_prompt].contains(&"retrieve"));
    assert_eq!(traces[0].final_answer, "Alpha beta gamma. Delta epsilon zeta.");
}

#[tokio::test(flavor = "multi_thread")]
async fn conditional_runs_stream_judger_events() {
    let s = server().await;
    let mut cfg = base_config("conditional");
    cfg["judger"] = json!({
        "type": "skr",
        "training": "skr_train.jsonl",
        "k": 3,
        "embedding": { "service": { "type": "mock" }, "model": "hash" },
    });
    let id = s.start(json!({ "config": cfg, "dataset": { "path": "dataset.jsonl" }, "sample": 4 })).await;
    let events = s.events(&id, None).await;
    let k = kinds(&events);
    assert_eq!(k.iter().filter(|x| **x == "judger").count(), 4);
    assert_eq!(k.iter().filter(|x| **x == "final").count(), 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_runs_keep_separate_streams() {
    let s = server().await;
    let a = s.start(json!({ "config": base_config("sequential"), "dataset": { "path": "dataset.jsonl" } }));
    let b = s.start(json!({ "config": base_config("iter_retgen"), "dataset": { "path": "dataset.jsonl" } }));
    let (a, b) = tokio::join!(a, b);
    assert_ne!(a, b);
    let (ea, eb) = tokio::join!(s.events(&a, None), s.events(&b, None));
    for (id, ev) in [(&a, &ea), (&b, &eb)] {
        assert_contiguous(ev, 1);
        assert!(ev.iter().all(|e| &e.run_id == id));
        assert_eq!(ev.iter().filter(|e| e.kind == "final").count(), 10);
    }
    assert!(kinds(&eb).contains(&"iteration"));
    assert_eq!(s.get("/runs").await.1.as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn finished_runs_survive_a_restart() {
    let s = server().await;
    let id = s.start(json!({ "config": base_config("sequential"), "question": "Where is Eskara?" })).await;
    let before = s.events(&id, None).await;

    let state = AppState::open(s.config.clone()).unwrap();
    let url = spawn(router(Arc::new(state))).await;
    let again = Server {
        url,
        http: reqwest::Client::new(),
        _dir: tempfile::tempdir().unwrap(),
        config: s.config.clone(),
    };
    let (status, h) = again.get(&format!("/runs/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(h["status"], "done");
    assert_eq!(again.events(&id, None).await, before);
    assert_eq!(again.get(&format!("/runs/{id}/trace")).await, s.get(&format!("/runs/{id}/trace")).await);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_are_404() {
    let s = server().await;
    for path in ["/runs/nope", "/runs/nope/events", "/runs/nope/trace", "/runs/nope/report", "/indexes/nope"] {
        let resp = s.http.get(format!("{}{path}", s.url)).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::NOT_FOUND, "{path}");
    }
    assert_eq!(s.post("/evaluate", json!({ "run_id": "nope" })).await.0, StatusCode::NOT_FOUND);
    let (status, _) = s.post("/indexes", json!({ "corpus": "nope", "index": { "type": "bm25" } })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn registry_corpora_and_schemas() {
    let s = server().await;
    let (_, pipelines) = s.get("/pipelines").await;
    let names: Vec<&str> = pipelines.as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["sequential", "conditional", "replug", "sure", "iter_retgen", "self_ask", "flare"]);
    let flare = &pipelines[6];
    assert_eq!(flare["family"], "loop");
    assert!(flare["schema"]["properties"]["flare_theta"].is_object());
    assert!(flare["schema"]["properties"]["top_k"].is_object());
    assert!(pipelines[0]["schema"]["properties"].get("flare_theta").is_none());

    let (_, corpora) = s.get("/corpora").await;
    assert_eq!(corpora[0]["name"], "toy");
    assert_eq!(corpora[0]["passage_count"], 100);

    let (_, schema) = s.get("/schema").await;
    for key in ["experiment_config", "run_request", "run_handle", "step_event", "evaluate_request", "index_request"] {
        assert!(schema[key].is_object(), "{key}");
    }
    assert!(schema["experiment_config"]["properties"]["pipeline"].is_object());
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_preflight_is_answered() {
    let s = server().await;
    let resp = s
        .http
        .request(reqwest::Method::OPTIONS, format!("{}/runs", s.url))
        .header("Origin", "http://localhost:5173")
        .header("Access-Control-Request-Method", "POST")
        .send()
        .await
        .unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

/// Embedding backend that holds every request until the gate opens.
struct GatedEmbedder(Gate);

impl EmbeddingBackend for GatedEmbedder {
    fn describe(&self) -> String {
        "gated".into()
    }

    fn embed_batch(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        self.0.wait();
        HashEmbedder::default().embed_batch(model, inputs)
    }
}

async fn wait_index(s: &Server, id: &str) -> Value {
    for _ in 0..600 {
        let (_, job) = s.get(&format!("/indexes/{id}")).await;
        if job["status"] != "building" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("index {id} did not finish");
}

#[tokio::test(flavor = "multi_thread")]
async fn index_builds_are_async_and_serialized_per_corpus() {
    let gate = Gate::default();
    let backends = MockBackends {
        embedder: Arc::new(GatedEmbedder(gate.clone())),
        ..MockBackends::default()
    };
    let mock = spawn(mock_router(backends)).await;
    let s = server().await;

    let dense = json!({
        "corpus": "toy",
        "index": {
            "type": "dense",
            "embedding": {
                "service": { "type": "http", "endpoint": format!("{mock}/v1/embeddings"), "max_retries": 0 },
                "model": "hash",
            },
            "metric": "cosine",
        },
    });
    let (status, job) = s.post("/indexes", dense.clone()).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    assert_eq!(job["status"], "building");

    let (status, busy) = s.post("/indexes", json!({ "corpus": "toy", "index": { "type": "bm25" } })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(busy["index_id"], "toy-dense");

    gate.open();
    let done = wait_index(&s, "toy-dense").await;
    assert_eq!(done["status"], "ready", "{done}");
    assert_eq!(done["summary"]["passage_count"], 100);

    let (status, _) = s.post("/indexes", json!({ "corpus": "toy", "index": { "type": "bm25" } })).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let bm25 = wait_index(&s, "toy-bm25").await;
    assert_eq!(bm25["status"], "ready");

    // The built index drives a run.
    let mut cfg = base_config("sequential");
    let file = PathBuf::from(bm25["dir"].as_str().unwrap()).join(ragforge_core::runner::BM25_INDEX_FILE);
    cfg["retriever"]["index"] = json!(file);
    let id = s.start(json!({ "config": cfg, "question": "Where is Eskara?" })).await;
    assert_eq!(s.events(&id, None).await.last().unwrap().payload["status"], "done");

    let (_, corpora) = s.get("/corpora").await;
    assert_eq!(corpora[0]["indexes"].as_array().unwrap().len(), 2);
    let (status, _) = s.post("/indexes", json!({ "corpus": "toy", "index": { "type": "hnsw" } })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

// wire compatibility of the mock services with the core clients

#[tokio::test(flavor = "multi_thread")]
async fn mock_services_match_the_in_process_mocks() {
    let url = spawn(mock_router(MockBackends::default())).await;
    tokio::task::spawn_blocking(move || {
        let client = OpenAiChatClient::new(OpenAiChatConfig {
            http: HttpSettings::new(format!("{url}/v1/chat/completions")),
            model: "mock".into(),
            capabilities: MockGenerator::new().capabilities(),
        })
        .unwrap();
        client.probe().unwrap();
        let local = MockGenerator::new();
        let messages = vec![
            Message::system("Answer the question based on the given documents.\nDoc 1(Title: Eskara) The capital of Eskara is Ardent."),
            Message::user("Question: What is the capital of Eskara?"),
        ];
        let params = GenerationParams {
            logprobs: true,
            ..GenerationParams::default()
        };
        assert_eq!(client.complete(&messages, &params).unwrap(), local.complete(&messages, &params).unwrap());
        assert_eq!(
            client.score_tokens(&messages, "Ardent city").unwrap(),
            local.score_tokens(&messages, "Ardent city").unwrap()
        );

        let emb = HttpEmbeddingBackend::new(HttpSettings::new(format!("{url}/v1/embeddings"))).unwrap();
        let texts = vec!["river stone".to_string(), "blue tower".to_string()];
        assert_eq!(
            emb.embed_batch("hash", &texts).unwrap(),
            HashEmbedder::default().embed_batch("hash", &texts).unwrap()
        );

        let rr = CrossEncoderReranker::new(HttpSettings::new(format!("{url}/v1/rerank")), "mock").unwrap();
        let cands: Vec<RetrievedPassage> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| RetrievedPassage {
                id: i.to_string(),
                title: String::new(),
                contents: t.clone(),
                score: 0.0,
                rank: i + 1,
            })
            .collect();
        assert_eq!(rr.score("river", &cands).unwrap(), mock_rerank_scores("river", &texts));
    })
    .await
    .unwrap();
}
