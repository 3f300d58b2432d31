//! Live and finished runs, each with an append-only event log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use ragforge_core::pipeline::EventSink;
use ragforge_core::runner::{MANIFEST_FILE, RunManifest};
use ragforge_core::{PipelineTrace, Step};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

/// Event log persisted next to the runner's artifacts.
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed)
    }
}

/// One entry of a run's event stream.
///
/// `kind` is a step kind (`judger`, `retrieve`, `rerank`, `refine`,
/// `prompt`, `generate`, `iteration`), `final` once per item, `error` for
/// item or run failures, and `end` exactly once as the last event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StepEvent {
    pub run_id: String,
    /// Starts at 1 and increases by one per event.
    pub seq: u64,
    /// Absent for run-level `error` and `end` events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub kind: String,
    pub payload: Value,
}

/// `final` payload: the trace fields not carried by the step events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPayload {
    pub schema_version: u32,
    pub question: String,
    pub golden_answers: Vec<String>,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<ragforge_core::pipeline::BranchSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunHandle {
    pub run_id: String,
    pub status: RunStatus,
    /// The validated config the run executes.
    pub config: Value,
    /// Sequence number of the latest event, 0 before the first.
    pub cursor: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Inner {
    status: RunStatus,
    error: Option<String>,
    events: Vec<StepEvent>,
    log: Option<File>,
}

pub struct RunEntry {
    pub id: String,
    pub dir: PathBuf,
    config: Value,
    inner: Mutex<Inner>,
    tx: watch::Sender<u64>,
}

impl RunEntry {
    pub fn new(id: String, dir: PathBuf, config: Value) -> Self {
        Self {
            id,
            dir,
            config,
            inner: Mutex::new(Inner {
                status: RunStatus::Pending,
                error: None,
                events: Vec::new(),
                log: None,
            }),
            tx: watch::channel(0).0,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn handle(&self) -> RunHandle {
        let g = self.lock();
        RunHandle {
            run_id: self.id.clone(),
            status: g.status,
            config: self.config.clone(),
            cursor: g.events.len() as u64,
            error: g.error.clone(),
        }
    }

    pub fn status(&self) -> RunStatus {
        self.lock().status
    }

    /// Opens the on-disk event log and marks the run as running.
    pub fn start(&self) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(EVENTS_FILE))?;
        let mut g = self.lock();
        g.log = Some(f);
        g.status = RunStatus::Running;
        Ok(())
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.tx.subscribe()
    }

    /// Events with `seq > after`, and whether the stream is complete.
    pub fn events_after(&self, after: u64) -> (Vec<StepEvent>, bool) {
        let g = self.lock();
        let from = (after as usize).min(g.events.len());
        (g.events[from..].to_vec(), g.status.is_terminal())
    }

    fn push_locked(&self, g: &mut Inner, item_id: Option<&str>, kind: &str, payload: Value) {
        let ev = StepEvent {
            run_id: self.id.clone(),
            seq: g.events.len() as u64 + 1,
            item_id: item_id.map(str::to_string),
            kind: kind.to_string(),
            payload,
        };
        if let Some(f) = &mut g.log {
            let line = serde_json::to_string(&ev).expect("event serializes");
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("run {}: could not append event: {e}", self.id);
            }
        }
        g.events.push(ev);
        self.tx.send_replace(g.events.len() as u64);
    }

    pub fn push(&self, item_id: Option<&str>, kind: &str, payload: Value) {
        let mut g = self.lock();
        self.push_locked(&mut g, item_id, kind, payload);
    }

    /// Records the terminal state and emits the closing `end` event.
    pub fn finish(&self, result: Result<(), String>) {
        let mut g = self.lock();
        let (status, error) = match result {
            Ok(()) => (RunStatus::Done, None),
            Err(e) => {
                self.push_locked(&mut g, None, "error", json!({ "message": e }));
                (RunStatus::Failed, Some(e))
            }
        };
        g.status = status;
        g.error = error.clone();
        self.push_locked(&mut g, None, "end", json!({ "status": status, "error": error }));
        g.log = None;
    }

    /// Rebuilds a finished run from its directory.
    pub fn load(dir: &Path) -> Option<Self> {
        let manifest = RunManifest::load(&dir.join(MANIFEST_FILE)).ok();
        let events = read_events(&dir.join(EVENTS_FILE));
        if manifest.is_none() && events.is_empty() {
            return None;
        }
        let id = manifest
            .as_ref()
            .map(|m| m.run_id.clone())
            .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))?;
        let ended = events.last().filter(|e| e.kind == "end");
        let status = match ended.and_then(|e| e.payload.get("status")) {
            Some(s) => serde_json::from_value(s.clone()).unwrap_or(RunStatus::Failed),
            // A run interrupted before its end event never finished.
            None => RunStatus::Failed,
        };
        let error = match ended {
            Some(e) => e.payload.get("error").and_then(Value::as_str).map(str::to_string),
            None => Some("interrupted".into()),
        };
        let config = manifest
            .map(|m| serde_json::to_value(m.config).expect("config serializes"))
            .unwrap_or(Value::Null);
        let entry = Self::new(id, dir.to_path_buf(), config);
        {
            let mut g = entry.lock();
            g.status = status;
            g.error = error;
            g.events = events;
            entry.tx.send_replace(g.events.len() as u64);
        }
        Some(entry)
    }
}

fn read_events(path: &Path) -> Vec<StepEvent> {
    let Ok(f) = File::open(path) else {
        return Vec::new();
    };
    BufReader::new(f)
        .lines()
        .map_while(Result::ok)
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str(&l).ok())
        .collect()
}

/// Forwards pipeline steps into a run's event log.
pub struct RunSink(pub Arc<RunEntry>);

impl EventSink for RunSink {
    fn step(&self, item_id: &str, step: &Step) {
        let payload = serde_json::to_value(step).expect("step serializes");
        self.0.push(Some(item_id), step.kind(), payload);
    }

    fn finished(&self, trace: &PipelineTrace) {
        let mut g = self.0.lock();
        if let Some(e) = &trace.error {
            self.0
                .push_locked(&mut g, Some(&trace.item_id), "error", json!({ "message": e }));
        }
        let fin = FinalPayload {
            schema_version: trace.schema_version,
            question: trace.question.clone(),
            golden_answers: trace.golden_answers.clone(),
            final_answer: trace.final_answer.clone(),
            branch: trace.branch.clone(),
            flags: trace.flags.clone(),
            error: trace.error.clone(),
        };
        let payload = serde_json::to_value(fin).expect("final payload serializes");
        self.0.push_locked(&mut g, Some(&trace.item_id), "final", payload);
    }
}

/// Rebuilds per-item traces from an event sequence, in first-seen item
/// order. Items without a `final` event are left out.
pub fn traces_from_events(events: &[StepEvent]) -> Result<Vec<PipelineTrace>, serde_json::Error> {
    let mut order: Vec<String> = Vec::new();
    let mut steps: std::collections::HashMap<String, Vec<Step>> = Default::default();
    let mut finals: std::collections::HashMap<String, FinalPayload> = Default::default();
    for ev in events {
        let Some(item) = &ev.item_id else { continue };
        if !steps.contains_key(item) {
            order.push(item.clone());
            steps.insert(item.clone(), Vec::new());
        }
        match ev.kind.as_str() {
            "final" => {
                finals.insert(item.clone(), serde_json::from_value(ev.payload.clone())?);
            }
            "error" => {}
            _ => steps
                .get_mut(item)
                .expect("inserted above")
                .push(serde_json::from_value(ev.payload.clone())?),
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|id| {
            let f = finals.remove(&id)?;
            Some(PipelineTrace {
                schema_version: f.schema_version,
                steps: steps.remove(&id).unwrap_or_default(),
                item_id: id,
                question: f.question,
                golden_answers: f.golden_answers,
                branch: f.branch,
                final_answer: f.final_answer,
                flags: f.flags,
                error: f.error,
            })
        })
        .collect())
}
