//! Pipeline topologies: sequential, conditional, branching (REPLUG, SuRe)
//! and loops (Iter-RetGen, Self-Ask, FLARE). Every item yields a trace and a
//! final answer; item failures are recorded rather than propagated.

mod branching;
mod config;
mod loops;
pub mod prompts;
mod trace;

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataspec::Item;
use crate::generate::{build_prompt, build_prompt_with_context, generate, GenerateError, GenerationOutput, GenerationParams, Generator, Message};
use crate::judge::{JudgeError, Judger, Verdict};
use crate::refine::{RefineError, Refiner};
use crate::retrieval::{rerank, resolve, retrieve, RetrievalError, RetrievalRequest, RetrievedPassage, Reranker, Retriever};

pub use branching::{argmax_first, softmax};
pub use config::{PipelineConfig, PipelineTemplates, Topology};
pub use loops::{flare_query, parse_self_ask, SelfAskMove};
pub use trace::{
    BranchSummary, Candidate, EventSink, PipelineTrace, Recorder, Step, StepTiming, TRACE_SCHEMA_VERSION,
};

pub const FLAG_TRUNCATED: &str = "truncated";
pub const FLAG_UNPARSED: &str = "unparsed";
pub const FLAG_REFINE_FALLBACK: &str = "refine_fallback";
pub const FLAG_JUDGER_ERROR: &str = "judger_error";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("topology `{topology}` requires a {component}")]
    MissingComponent {
        topology: &'static str,
        component: &'static str,
    },
    #[error("topology `{topology}` requires a generator with {capability}")]
    Unsupported {
        topology: &'static str,
        capability: &'static str,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Component handles shared by all workers.
#[derive(Clone)]
pub struct Components {
    pub retriever: Option<Arc<dyn Retriever>>,
    pub reranker: Option<Arc<dyn Reranker>>,
    pub refiner: Option<Arc<Refiner>>,
    pub generator: Arc<dyn Generator>,
    pub judger: Option<Arc<dyn Judger>>,
}

impl Components {
    pub fn new(generator: Arc<dyn Generator>) -> Self {
        Self {
            retriever: None,
            reranker: None,
            refiner: None,
            generator,
            judger: None,
        }
    }

    pub fn with_retriever(mut self, r: Arc<dyn Retriever>) -> Self {
        self.retriever = Some(r);
        self
    }

    pub fn with_reranker(mut self, r: Arc<dyn Reranker>) -> Self {
        self.reranker = Some(r);
        self
    }

    pub fn with_refiner(mut self, r: Arc<Refiner>) -> Self {
        self.refiner = Some(r);
        self
    }

    pub fn with_judger(mut self, j: Arc<dyn Judger>) -> Self {
        self.judger = Some(j);
        self
    }
}

/// Trace plus wall-clock timings, which are kept out of the trace so traces
/// stay byte-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutcome {
    pub trace: PipelineTrace,
    pub timings: Vec<StepTiming>,
}

/// Mutable per-item state beyond the step list.
#[derive(Default)]
pub(crate) struct Extras {
    pub branch: Option<BranchSummary>,
    pub flags: Vec<String>,
}

impl Extras {
    pub fn flag(&mut self, f: &str) {
        if !self.flags.iter().any(|x| x == f) {
            self.flags.push(f.to_string());
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    comps: Components,
}

impl Pipeline {
    /// Validates the config and checks the components and capabilities the
    /// topology needs, before any item runs.
    pub fn new(cfg: PipelineConfig, comps: Components) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let p = Self { cfg, comps };
        p.check(p.cfg.topology)?;
        if p.cfg.topology == Topology::Conditional {
            p.check(p.cfg.retrieval_branch)?;
        }
        if let Some(r) = &p.comps.refiner {
            r.validate()?;
        }
        Ok(p)
    }

    fn check(&self, t: Topology) -> Result<(), PipelineError> {
        let name = t.as_str();
        if t.needs_retriever() && self.comps.retriever.is_none() {
            return Err(PipelineError::MissingComponent {
                topology: name,
                component: "retriever",
            });
        }
        if t == Topology::Conditional && self.comps.judger.is_none() {
            return Err(PipelineError::MissingComponent {
                topology: name,
                component: "judger",
            });
        }
        let caps = self.comps.generator.capabilities();
        if t == Topology::Replug && !caps.supports_scoring {
            return Err(PipelineError::Unsupported {
                topology: name,
                capability: "sequence scoring",
            });
        }
        if t == Topology::Flare && !caps.supports_logprobs {
            return Err(PipelineError::Unsupported {
                topology: name,
                capability: "token logprobs",
            });
        }
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn components(&self) -> &Components {
        &self.comps
    }

    /// Runs all items with at most `parallelism` in flight. Output order
    /// matches input order.
    pub fn run(&self, items: &[Item], parallelism: usize, sink: Option<&dyn EventSink>) -> Vec<ItemOutcome> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            if self.cfg.topology == Topology::Conditional {
                self.run_conditional(items, sink)
            } else {
                items
                    .par_iter()
                    .map(|item| self.run_one(item, self.cfg.topology, None, sink))
                    .collect()
            }
        })
    }

    /// Judges every item, runs the two partitions as separate batches, then
    /// merges the results back into input order.
    fn run_conditional(&self, items: &[Item], sink: Option<&dyn EventSink>) -> Vec<ItemOutcome> {
        let judger = self.comps.judger.as_ref().expect("checked in new");
        let judged: Vec<(Step, f64, Verdict)> = items
            .par_iter()
            .map(|item| {
                let t0 = Instant::now();
                let (step, verdict) = match judger.judge(&item.question) {
                    Ok(j) => (
                        Step::Judger {
                            verdict: j.verdict,
                            neighbors: j.neighbors,
                            error: None,
                        },
                        j.verdict,
                    ),
                    Err(e) => {
                        log::warn!("judger failed on item {}: {e}; using the retrieval branch", item.id);
                        (
                            Step::Judger {
                                verdict: Verdict::Retrieve,
                                neighbors: Vec::new(),
                                error: Some(e.to_string()),
                            },
                            Verdict::Retrieve,
                        )
                    }
                };
                (step, t0.elapsed().as_secs_f64() * 1000.0, verdict)
            })
            .collect();
        let (retrieve_idx, direct_idx): (Vec<usize>, Vec<usize>) =
            (0..items.len()).partition(|&i| judged[i].2 == Verdict::Retrieve);
        let run_batch = |idx: &[usize], topology: Topology| -> Vec<(usize, ItemOutcome)> {
            idx.par_iter()
                .map(|&i| {
                    let prefix = (judged[i].0.clone(), judged[i].1);
                    (i, self.run_one(&items[i], topology, Some(prefix), sink))
                })
                .collect()
        };
        let a = run_batch(&retrieve_idx, self.cfg.retrieval_branch);
        let b = run_batch(&direct_idx, Topology::Naive);
        let mut slots: Vec<Option<ItemOutcome>> = vec![None; items.len()];
        for (i, o) in a.into_iter().chain(b) {
            slots[i] = Some(o);
        }
        slots.into_iter().map(|o| o.expect("every item runs once")).collect()
    }

    pub fn run_item(&self, item: &Item, sink: Option<&dyn EventSink>) -> ItemOutcome {
        self.run(std::slice::from_ref(item), 1, sink).remove(0)
    }

    fn run_one(
        &self,
        item: &Item,
        topology: Topology,
        prefix: Option<(Step, f64)>,
        sink: Option<&dyn EventSink>,
    ) -> ItemOutcome {
        let mut rec = Recorder::new(&item.id, sink);
        let mut extras = Extras::default();
        if let Some((step, millis)) = prefix {
            if matches!(&step, Step::Judger { error: Some(_), .. }) {
                extras.flag(FLAG_JUDGER_ERROR);
            }
            rec.push(step);
            if let Some(t) = rec.timings.last_mut() {
                t.millis = millis;
            }
        }
        rec.start();
        let result = self.execute(topology, &item.question, &mut rec, &mut extras);
        let (final_answer, error) = match result {
            Ok(a) => (a, None),
            Err(e) => {
                log::warn!("item {} failed: {e}", item.id);
                (String::new(), Some(e.to_string()))
            }
        };
        let trace = PipelineTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            item_id: item.id.clone(),
            question: item.question.clone(),
            golden_answers: item
                .golden_choice_texts()
                .map(|c| c.into_iter().map(str::to_string).collect())
                .unwrap_or_else(|| item.golden_answers.clone()),
            steps: rec.steps,
            branch: extras.branch,
            final_answer,
            flags: extras.flags,
            error,
        };
        if let Some(sink) = sink {
            sink.finished(&trace);
        }
        ItemOutcome {
            trace,
            timings: rec.timings,
        }
    }

    fn execute(
        &self,
        topology: Topology,
        question: &str,
        rec: &mut Recorder,
        extras: &mut Extras,
    ) -> Result<String, PipelineError> {
        match topology {
            Topology::Naive => self.naive(question, rec),
            Topology::Sequential => self.rag_once(question, question, rec, extras),
            Topology::IterRetgen => self.iter_retgen(question, rec, extras),
            Topology::Replug => self.replug(question, rec, extras),
            Topology::Sure => self.sure(question, rec, extras),
            Topology::SelfAsk => self.self_ask(question, rec, extras),
            Topology::Flare => self.flare(question, rec, extras),
            Topology::Conditional => unreachable!("conditional runs through run_conditional"),
        }
    }

    fn retriever(&self) -> &dyn Retriever {
        self.comps.retriever.as_deref().expect("checked in new")
    }

    /// Retrieve (and rerank, when configured), recording both steps.
    pub(crate) fn retrieve_step(
        &self,
        query: &str,
        top_k: usize,
        rec: &mut Recorder,
    ) -> Result<Vec<RetrievedPassage>, PipelineError> {
        let r = self.retriever();
        let hits = retrieve(r, &RetrievalRequest::new(query, top_k)?)?;
        let passages = resolve(r, &hits)?;
        rec.push(Step::Retrieve {
            query: query.to_string(),
            passages: passages.clone(),
        });
        let Some(reranker) = &self.comps.reranker else {
            return Ok(passages);
        };
        match rerank(reranker.as_ref(), query, passages.clone()) {
            Ok(reranked) => {
                rec.push(Step::Rerank {
                    passages: reranked.clone(),
                    error: None,
                });
                Ok(reranked)
            }
            Err(e) if self.cfg.rerank_fallback => {
                log::warn!("reranker failed ({e}); keeping retrieval order");
                rec.push(Step::Rerank {
                    passages: passages.clone(),
                    error: Some(e.to_string()),
                });
                Ok(passages)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub(crate) fn generate_step(
        &self,
        messages: Vec<Message>,
        params: &GenerationParams,
        label: Option<String>,
        rec: &mut Recorder,
    ) -> Result<GenerationOutput, PipelineError> {
        rec.push(Step::Prompt {
            label: label.clone(),
            messages: messages.clone(),
        });
        let output = generate(self.comps.generator.as_ref(), &messages, params)?;
        rec.push(Step::Generate {
            label,
            output: output.clone(),
        });
        Ok(output)
    }

    fn naive(&self, question: &str, rec: &mut Recorder) -> Result<String, PipelineError> {
        let messages = build_prompt(question, &[], &self.cfg.prompt)?;
        let out = self.generate_step(messages, &self.cfg.generation, None, rec)?;
        Ok(out.text.trim().to_string())
    }

    /// retrieve → rerank? → refine? → prompt → generate.
    fn rag_once(
        &self,
        question: &str,
        query: &str,
        rec: &mut Recorder,
        extras: &mut Extras,
    ) -> Result<String, PipelineError> {
        let passages = self.retrieve_step(query, self.cfg.top_k, rec)?;
        let messages = match &self.comps.refiner {
            Some(refiner) => match refiner.refine(question, &passages) {
                Ok(r) => {
                    rec.push(Step::Refine {
                        refiner: refiner.kind().as_str().into(),
                        text: r.text.clone(),
                        tokens_before: r.tokens_before,
                        tokens_after: r.tokens_after,
                    });
                    build_prompt_with_context(question, &r.text, &self.cfg.prompt)?
                }
                Err(e) if refiner.kind() == crate::refine::RefinerKind::Abstractive => {
                    log::warn!("abstractive refiner failed ({e}); using unrefined passages");
                    extras.flag(FLAG_REFINE_FALLBACK);
                    build_prompt(question, &passages, &self.cfg.prompt)?
                }
                Err(e) => return Err(e.into()),
            },
            None => build_prompt(question, &passages, &self.cfg.prompt)?,
        };
        let out = self.generate_step(messages, &self.cfg.generation, None, rec)?;
        Ok(out.text.trim().to_string())
    }

    /// Retrieval query for iteration t > 1 is the question plus the previous
    /// answer. A single iteration is plain sequential RAG.
    fn iter_retgen(&self, question: &str, rec: &mut Recorder, extras: &mut Extras) -> Result<String, PipelineError> {
        if self.cfg.n_iter == 1 {
            return self.rag_once(question, question, rec, extras);
        }
        let mut answer = String::new();
        for t in 1..=self.cfg.n_iter {
            let query = if t == 1 {
                question.to_string()
            } else {
                format!("{question} {answer}")
            };
            let mut child = rec.child();
            let result = self.rag_once(question, &query, &mut child, extras);
            let steps = std::mem::take(&mut child.steps);
            match result {
                Ok(a) => {
                    answer = a;
                    rec.push(Step::Iteration {
                        index: t,
                        query,
                        steps,
                        answer: answer.clone(),
                    });
                }
                Err(e) => {
                    rec.push(Step::Iteration {
                        index: t,
                        query,
                        steps,
                        answer: String::new(),
                    });
                    return Err(e);
                }
            }
        }
        Ok(answer)
    }
}
