use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::corpus::ChunkPolicy;
use crate::dataspec::Split;
use crate::dense::{EmbeddingClientConfig, Metric as VectorMetric, DEFAULT_EMBED_BATCH};
use crate::evaluate::{Metric, RecallMode};
use crate::generate::OpenAiChatConfig;
use crate::judge::DEFAULT_SKR_K;
use crate::pipeline::{PipelineConfig, Topology};
use crate::refine::RefinerKind;
use crate::transport::HttpSettings;

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// The first `sample` items.
    First,
    /// `sample` items drawn with the run seed, kept in file order.
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MetadataFilter {
    pub key: String,
    pub equals: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default)]
    pub sample_mode: SampleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<MetadataFilter>,
}

/// Either a ready passage file, or documents plus a chunking policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CorpusRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<ChunkPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServiceSpec {
    /// The in-process deterministic mock.
    Mock,
    Http(HttpSettings),
}

fn default_embed_batch() -> usize {
    DEFAULT_EMBED_BATCH
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub service: ServiceSpec,
    pub model: String,
    #[serde(default = "default_embed_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub query_prefix: String,
    #[serde(default)]
    pub passage_prefix: String,
    #[serde(default = "one")]
    pub parallelism: usize,
}

impl EmbeddingSpec {
    pub fn client_config(&self) -> EmbeddingClientConfig {
        EmbeddingClientConfig {
            model: self.model.clone(),
            batch_size: self.batch_size,
            query_prefix: self.query_prefix.clone(),
            passage_prefix: self.passage_prefix.clone(),
            parallelism: self.parallelism,
        }
    }
}

fn default_k1() -> f64 {
    0.9
}

fn default_b() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RetrieverSpec {
    Bm25 {
        #[serde(default = "default_k1")]
        k1: f64,
        #[serde(default = "default_b")]
        b: f64,
        /// Prebuilt postings dump; built from the corpus when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index: Option<PathBuf>,
    },
    Dense {
        embedding: EmbeddingSpec,
        #[serde(default)]
        metric: VectorMetric,
        /// Precomputed `{"id","vector"}` lines; embedded on the fly when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vectors: Option<PathBuf>,
    },
    /// Results imported from an external retriever's output file.
    ExternalCache { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RerankerSpec {
    BiEncoder { embedding: EmbeddingSpec },
    CrossEncoder { service: ServiceSpec, model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Mock,
    Openai(OpenAiChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RefinerSpec {
    pub kind: RefinerKind,
    /// Defaults to 0.5 for perplexity and 0.55 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression_rate: Option<f64>,
    /// Extractive word budget; overrides the rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<usize>,
    /// Abstractive summary length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    /// Required for the extractive refiner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSpec>,
    /// Scorer or summarizer; the main generator when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

impl RefinerSpec {
    pub fn rate(&self) -> f64 {
        self.compression_rate.unwrap_or_else(|| self.kind.default_rate())
    }
}

fn default_skr_k() -> usize {
    DEFAULT_SKR_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgerSpec {
    Skr {
        /// JSONL of `{"question", "label"}`.
        training: PathBuf,
        #[serde(default = "default_skr_k")]
        k: usize,
        embedding: EmbeddingSpec,
    },
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional only for ad hoc runs that supply their own questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    pub corpus: CorpusRef,
    pub retriever: RetrieverSpec,
    /// Stores raw retrieval results across runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker: Option<RerankerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner: Option<RefinerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judger: Option<JudgerSpec>,
    pub generator: GeneratorSpec,
    pub pipeline: PipelineConfig,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub recall_mode: RecallMode,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

/// Closest candidate by normalized Levenshtein similarity.
fn suggest<'a>(unknown: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::normalized_levenshtein(unknown, c), *c))
        .filter(|(s, _)| *s >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// Pulls the unknown name and the expected names out of serde's
/// "unknown field `x`, expected one of `a`, `b`" message.
fn unknown_field_suggestion(message: &str) -> Option<String> {
    let start = message
        .find("unknown field `")
        .or_else(|| message.find("unknown variant `"))?;
    let rest = &message[start..];
    let rest = &rest[rest.find('`')? + 1..];
    let (name, tail) = rest.split_once('`')?;
    let expected: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
    suggest(name, &expected).map(str::to_string)
}

fn schema_error(path: String, raw: String) -> RunError {
    let message = raw.split(" at line ").next().unwrap_or(&raw);
    let message = message
        .strip_prefix(&format!("{path}: "))
        .unwrap_or(message)
        .to_string();
    RunError::Schema {
        suggestion: unknown_field_suggestion(&message),
        path,
        message,
    }
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, RunError> {
    let de = serde_yaml::Deserializer::from_str(text);
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(de).map_err(|e| schema_error(e.path().to_string(), e.inner().to_string()))?;
    finish(cfg, base_dir)
}

/// Same as [`parse_config`] for an already decoded JSON document.
pub fn parse_config_value(value: serde_json::Value, base_dir: &Path) -> Result<ExperimentConfig, RunError> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| schema_error(e.path().to_string(), e.inner().to_string()))?;
    finish(cfg, base_dir)
}

fn finish(mut cfg: ExperimentConfig, base_dir: &Path) -> Result<ExperimentConfig, RunError> {
    cfg.resolve_paths(base_dir);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn invalid(field: &str, message: impl Into<String>) -> RunError {
    RunError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

fn require_file(field: &str, p: &Path) -> Result<(), RunError> {
    if p.exists() {
        Ok(())
    } else {
        Err(invalid(field, format!("path {} does not exist", p.display())))
    }
}

impl ExperimentConfig {
    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(d) = &mut self.dataset {
            resolve(base, &mut d.path);
        }
        for p in [&mut self.corpus.path, &mut self.corpus.documents, &mut self.retrieval_cache]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        match &mut self.retriever {
            RetrieverSpec::Bm25 { index: Some(p), .. } | RetrieverSpec::Dense { vectors: Some(p), .. } => {
                resolve(base, p)
            }
            RetrieverSpec::ExternalCache { path } => resolve(base, path),
            _ => {}
        }
        if let Some(JudgerSpec::Skr { training, .. }) = &mut self.judger {
            resolve(base, training);
        }
        resolve(base, &mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.pipeline.validate().map_err(|e| match e {
            crate::pipeline::PipelineError::Config { field, message } => invalid(&format!("pipeline.{field}"), message),
            other => invalid("pipeline", other.to_string()),
        })?;
        if let Some(d) = &self.dataset {
            require_file("dataset.path", &d.path)?;
            if d.sample == Some(0) {
                return Err(invalid("dataset.sample", "must be >= 1"));
            }
        }
        match (&self.corpus.path, &self.corpus.documents, &self.corpus.chunk) {
            (Some(p), None, None) => require_file("corpus.path", p)?,
            (None, Some(p), Some(policy)) => {
                require_file("corpus.documents", p)?;
                policy.validate().map_err(|e| invalid("corpus.chunk", e.to_string()))?;
            }
            (None, Some(_), None) => return Err(invalid("corpus.chunk", "required with corpus.documents")),
            _ => return Err(invalid("corpus", "give either `path`, or `documents` with `chunk`")),
        }
        match &self.retriever {
            RetrieverSpec::Bm25 { k1, b, index } => {
                crate::sparse::Bm25Params::new(*k1, *b).map_err(|e| invalid("retriever", e.to_string()))?;
                if let Some(p) = index {
                    require_file("retriever.index", p)?;
                }
            }
            RetrieverSpec::Dense { vectors, embedding, .. } => {
                if let Some(p) = vectors {
                    require_file("retriever.vectors", p)?;
                }
                validate_embedding("retriever.embedding", embedding)?;
            }
            RetrieverSpec::ExternalCache { path } => require_file("retriever.path", path)?,
        }
        if let Some(r) = &self.refiner {
            let rate = r.rate();
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(invalid("refiner.compression_rate", format!("must be in (0, 1], got {rate}")));
            }
            if r.kind == RefinerKind::Extractive && r.embedding.is_none() {
                return Err(invalid("refiner.embedding", "required for the extractive refiner"));
            }
        }
        if let Some(JudgerSpec::Skr { training, k, embedding }) = &self.judger {
            require_file("judger.training", training)?;
            if *k == 0 {
                return Err(invalid("judger.k", "must be >= 1"));
            }
            validate_embedding("judger.embedding", embedding)?;
        }
        if self.pipeline.topology == Topology::Conditional && self.judger.is_none() {
            return Err(invalid("judger", "required by the conditional topology"));
        }
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be >= 1"));
        }
        if self.metrics.is_empty() {
            return Err(invalid("metrics", "list at least one metric"));
        }
        Ok(())
    }
}

fn validate_embedding(field: &str, e: &EmbeddingSpec) -> Result<(), RunError> {
    if e.batch_size == 0 {
        return Err(invalid(&format!("{field}.batch_size"), "must be >= 1"));
    }
    if e.parallelism == 0 {
        return Err(invalid(&format!("{field}.parallelism"), "must be >= 1"));
    }
    Ok(())
}


/// JSON Schema of the experiment config, as served to form builders.
pub fn config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

#[cfg(test)]
mod schema_tests {
    #[test]
    fn schema_lists_top_level_keys() {
        let s = super::config_schema();
        let props = s["properties"].as_object().unwrap();
        for k in ["dataset", "corpus", "retriever", "generator", "pipeline", "metrics", "seed"] {
            assert!(props.contains_key(k), "{k}");
        }
    }
}
