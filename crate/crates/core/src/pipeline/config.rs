use serde::{Deserialize, Serialize};

use super::prompts;
use super::PipelineError;
use crate::generate::{GenerationParams, PromptTemplate};
use crate::retrieval::DEFAULT_TOP_K;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Generation with no retrieval at all.
    Naive,
    Sequential,
    Conditional,
    Replug,
    Sure,
    IterRetgen,
    SelfAsk,
    Flare,
}

impl Topology {
    /// The topologies offered to users; `naive` is the direct branch of
    /// `conditional` and a baseline.
    pub const REGISTERED: [Topology; 7] = [
        Topology::Sequential,
        Topology::Conditional,
        Topology::Replug,
        Topology::Sure,
        Topology::IterRetgen,
        Topology::SelfAsk,
        Topology::Flare,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Naive => "naive",
            Topology::Sequential => "sequential",
            Topology::Conditional => "conditional",
            Topology::Replug => "replug",
            Topology::Sure => "sure",
            Topology::IterRetgen => "iter_retgen",
            Topology::SelfAsk => "self_ask",
            Topology::Flare => "flare",
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Topology::Naive | Topology::Sequential => "sequential",
            Topology::Conditional => "conditional",
            Topology::Replug | Topology::Sure => "branching",
            Topology::IterRetgen | Topology::SelfAsk | Topology::Flare => "loop",
        }
    }

    /// Parameter names of [`PipelineConfig`] the topology reads, besides
    /// `top_k` and `generation`.
    pub fn parameters(&self) -> &'static [&'static str] {
        match self {
            Topology::Naive | Topology::Sequential => &[],
            Topology::Conditional => &["retrieval_branch"],
            Topology::Replug => &["replug_candidates"],
            Topology::Sure => &["templates"],
            Topology::IterRetgen => &["n_iter"],
            Topology::SelfAsk => &["max_rounds", "templates"],
            Topology::Flare => &["flare_theta"],
        }
    }

    pub fn needs_retriever(&self) -> bool {
        !matches!(self, Topology::Naive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineTemplates {
    /// Slots: `{passages}`, `{question}`, `{candidate}`.
    pub sure_summary: String,
    /// Slots: `{question}`, `{summary_1}`, `{summary_2}`.
    pub sure_rank: String,
    /// Few-shot demonstrations placed before the question.
    pub self_ask_examples: String,
}

impl Default for PipelineTemplates {
    fn default() -> Self {
        Self {
            sure_summary: prompts::SURE_SUMMARY_TEMPLATE.into(),
            sure_rank: prompts::SURE_RANK_TEMPLATE.into(),
            self_ask_examples: prompts::SELF_ASK_EXAMPLES.into(),
        }
    }
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_n_iter() -> usize {
    3
}

fn default_max_rounds() -> usize {
    5
}

fn default_theta() -> f64 {
    0.8
}

fn default_branch() -> Topology {
    Topology::Sequential
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub topology: Topology,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_theta")]
    pub flare_theta: f64,
    /// Number of top passages that each produce a candidate; all by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replug_candidates: Option<usize>,
    /// Topology run for items the judger sends to retrieval.
    #[serde(default = "default_branch")]
    pub retrieval_branch: Topology,
    /// Keep retrieval order when the reranker fails instead of failing the item.
    #[serde(default)]
    pub rerank_fallback: bool,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default)]
    pub prompt: PromptTemplate,
    #[serde(default)]
    pub templates: PipelineTemplates,
}

impl PipelineConfig {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            top_k: default_top_k(),
            n_iter: default_n_iter(),
            max_rounds: default_max_rounds(),
            flare_theta: default_theta(),
            replug_candidates: None,
            retrieval_branch: default_branch(),
            rerank_fallback: false,
            generation: GenerationParams::default(),
            prompt: PromptTemplate::default(),
            templates: PipelineTemplates::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, msg: String| Err(PipelineError::Config { field: field.into(), message: msg });
        if self.top_k == 0 {
            return bad("top_k", "must be >= 1".into());
        }
        if self.n_iter == 0 {
            return bad("n_iter", "must be >= 1".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.flare_theta) {
            return bad("flare_theta", format!("must be in [0, 1], got {}", self.flare_theta));
        }
        if self.replug_candidates == Some(0) {
            return bad("replug_candidates", "must be >= 1".into());
        }
        if self.retrieval_branch == Topology::Conditional {
            return bad("retrieval_branch", "cannot itself be conditional".into());
        }
        self.generation.validate().or_else(|e| bad("generation", e.to_string()))?;
        self.prompt.validate().or_else(|e| bad("prompt", e.to_string()))?;
        Ok(())
    }
}
