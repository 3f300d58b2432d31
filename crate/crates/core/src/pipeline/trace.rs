use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::generate::{GenerationOutput, Message};
use crate::judge::{Neighbor, Verdict};
use crate::retrieval::RetrievedPassage;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// One pipeline step. Serialized with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    Judger {
        verdict: Verdict,
        #[serde(default)]
        neighbors: Vec<Neighbor>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Retrieve {
        query: String,
        passages: Vec<RetrievedPassage>,
    },
    Rerank {
        passages: Vec<RetrievedPassage>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Refine {
        refiner: String,
        text: String,
        tokens_before: usize,
        tokens_after: usize,
    },
    Prompt {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        messages: Vec<Message>,
    },
    Generate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        output: GenerationOutput,
    },
    Iteration {
        index: usize,
        query: String,
        steps: Vec<Step>,
        answer: String,
    },
}

impl Step {
    pub fn kind(&self) -> &'static str {
        match self {
            Step::Judger { .. } => "judger",
            Step::Retrieve { .. } => "retrieve",
            Step::Rerank { .. } => "rerank",
            Step::Refine { .. } => "refine",
            Step::Prompt { .. } => "prompt",
            Step::Generate { .. } => "generate",
            Step::Iteration { .. } => "iteration",
        }
    }
}

/// A scored candidate answer of a branching pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    /// REPLUG: combined probability. SuRe: ranking votes.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    /// REPLUG passage weights; empty for SuRe.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub winner: usize,
}

/// Per-item record of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub schema_version: u32,
    pub item_id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<BranchSummary>,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn walk<'a>(steps: &'a [Step], out: &mut Vec<&'a Step>) {
    for s in steps {
        out.push(s);
        if let Step::Iteration { steps, .. } = s {
            walk(steps, out);
        }
    }
}

impl PipelineTrace {
    /// All steps depth-first, iteration steps before their children.
    pub fn flat_steps(&self) -> Vec<&Step> {
        let mut out = Vec::new();
        walk(&self.steps, &mut out);
        out
    }

    /// The first passage list the generator saw: the first retrieval, or
    /// the rerank that immediately follows it.
    pub fn primary_retrieval(&self) -> Option<&[RetrievedPassage]> {
        let flat = self.flat_steps();
        let i = flat.iter().position(|s| matches!(s, Step::Retrieve { .. }))?;
        match (flat[i], flat.get(i + 1)) {
            (_, Some(Step::Rerank { passages, error: None })) => Some(passages),
            (Step::Retrieve { passages, .. }, _) => Some(passages),
            _ => None,
        }
    }
}

/// Wall time of one top-level step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub kind: String,
    pub millis: f64,
}

/// Receives steps as they complete.
pub trait EventSink: Send + Sync {
    fn step(&self, item_id: &str, step: &Step);

    fn finished(&self, trace: &PipelineTrace);
}

/// Collects steps for one item. Top-level recorders time steps and forward
/// them to the sink; nested ones (inside an iteration) only collect.
pub struct Recorder<'a> {
    pub(crate) steps: Vec<Step>,
    pub(crate) timings: Vec<StepTiming>,
    item_id: &'a str,
    sink: Option<&'a dyn EventSink>,
    nested: bool,
    last: Instant,
}

impl<'a> Recorder<'a> {
    pub fn new(item_id: &'a str, sink: Option<&'a dyn EventSink>) -> Self {
        Self {
            steps: Vec::new(),
            timings: Vec::new(),
            item_id,
            sink,
            nested: false,
            last: Instant::now(),
        }
    }

    pub fn child(&self) -> Recorder<'a> {
        Recorder {
            steps: Vec::new(),
            timings: Vec::new(),
            item_id: self.item_id,
            sink: None,
            nested: true,
            last: Instant::now(),
        }
    }

    /// Marks the start of the next step's work.
    pub fn start(&mut self) {
        self.last = Instant::now();
    }

    pub fn push(&mut self, step: Step) {
        if !self.nested {
            self.timings.push(StepTiming {
                kind: step.kind().into(),
                millis: self.last.elapsed().as_secs_f64() * 1000.0,
            });
            if let Some(sink) = self.sink {
                sink.step(self.item_id, &step);
            }
        }
        self.steps.push(step);
        self.last = Instant::now();
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }
}
