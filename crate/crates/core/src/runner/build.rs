//! Turns an [`ExperimentConfig`] into live components.

use std::path::PathBuf;
use std::sync::Arc;

use super::config::{
    CorpusRef, EmbeddingSpec, ExperimentConfig, GeneratorSpec, JudgerSpec, RerankerSpec, RetrieverSpec,
    ServiceSpec,
};
use super::RunError;
use crate::corpus::{chunk_documents, load_corpus, load_documents, PassageStore};
use crate::dense::{build_vector_store, DenseRetriever, EmbeddingBackend, EmbeddingClient, HttpEmbeddingBackend, VectorStore};
use crate::generate::{Generator, OpenAiChatClient};
use crate::judge::{Judger, SkrJudger};
use crate::mock::{HashEmbedder, MockCrossEncoder, MockGenerator};
use crate::pipeline::Components;
use crate::refine::{RefinerKind, Refiner};
use crate::retrieval::{
    BiEncoderReranker, CachedRetriever, CrossEncoderReranker, ExternalCacheRetriever, Reranker, RetrievalCache,
    Retriever,
};
use crate::sparse::{Bm25Params, Bm25Retriever, InvertedIndex};

pub fn load_passages(corpus: &CorpusRef) -> Result<PassageStore, RunError> {
    match (&corpus.path, &corpus.documents, &corpus.chunk) {
        (Some(p), _, _) => Ok(load_corpus(p)?),
        (None, Some(docs), Some(policy)) => {
            let docs = load_documents(docs)?;
            Ok(PassageStore::from_passages(chunk_documents(&docs, policy))?)
        }
        _ => Err(RunError::Invalid {
            field: "corpus".into(),
            message: "give either `path`, or `documents` with `chunk`".into(),
        }),
    }
}

pub fn embedding_client(spec: &EmbeddingSpec) -> Result<Arc<EmbeddingClient>, RunError> {
    let backend: Arc<dyn EmbeddingBackend> = match &spec.service {
        ServiceSpec::Mock => Arc::new(HashEmbedder::default()),
        ServiceSpec::Http(http) => Arc::new(HttpEmbeddingBackend::new(http.clone())?),
    };
    Ok(Arc::new(EmbeddingClient::new(spec.client_config(), backend)?))
}

pub fn generator(spec: &GeneratorSpec) -> Result<Arc<dyn Generator>, RunError> {
    Ok(match spec {
        GeneratorSpec::Mock => Arc::new(MockGenerator::new()),
        GeneratorSpec::Openai(c) => Arc::new(OpenAiChatClient::new(c.clone())?),
    })
}

/// One external dependency checked before any item runs.
pub struct Service {
    pub name: String,
    probe: Box<dyn Fn() -> Result<(), String> + Send + Sync>,
}

impl Service {
    pub fn from_fn(name: impl Into<String>, probe: impl Fn() -> Result<(), String> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            probe: Box::new(probe),
        }
    }

    pub fn probe(&self) -> Result<(), String> {
        (self.probe)()
    }
}

fn embedding_service(role: &str, c: &Arc<EmbeddingClient>) -> Service {
    let c = c.clone();
    Service::from_fn(format!("{role} ({})", c.describe()), move || c.probe().map_err(|e| e.to_string()))
}

enum RetrieverPlan {
    Bm25 { params: Bm25Params, index: Option<PathBuf> },
    Dense { client: Arc<EmbeddingClient>, metric: crate::dense::Metric, vectors: Option<PathBuf> },
    External(PathBuf),
}

/// Clients are constructed without network traffic so reachability can be
/// checked before anything expensive (such as corpus embedding) starts.
pub struct Plan {
    retriever: RetrieverPlan,
    reranker: Option<Arc<dyn Reranker>>,
    refiner: Option<Arc<Refiner>>,
    judger: Option<(PathBuf, usize, Arc<EmbeddingClient>)>,
    generator: Arc<dyn Generator>,
    pub services: Vec<Service>,
}

pub fn plan(cfg: &ExperimentConfig) -> Result<Plan, RunError> {
    let mut services = Vec::new();
    let gen = generator(&cfg.generator)?;
    {
        let g = gen.clone();
        services.push(Service::from_fn(format!("generator ({})", g.name()), move || {
            g.probe().map_err(|e| e.to_string())
        }));
    }

    let retriever = match &cfg.retriever {
        RetrieverSpec::Bm25 { k1, b, index } => RetrieverPlan::Bm25 {
            params: Bm25Params::new(*k1, *b)?,
            index: index.clone(),
        },
        RetrieverSpec::Dense { embedding, metric, vectors } => {
            let client = embedding_client(embedding)?;
            services.push(embedding_service("retriever embedding", &client));
            RetrieverPlan::Dense {
                client,
                metric: *metric,
                vectors: vectors.clone(),
            }
        }
        RetrieverSpec::ExternalCache { path } => RetrieverPlan::External(path.clone()),
    };

    let reranker: Option<Arc<dyn Reranker>> = match &cfg.reranker {
        None => None,
        Some(RerankerSpec::BiEncoder { embedding }) => {
            let client = embedding_client(embedding)?;
            services.push(embedding_service("reranker embedding", &client));
            Some(Arc::new(BiEncoderReranker::new(client)))
        }
        Some(RerankerSpec::CrossEncoder { service, model }) => match service {
            ServiceSpec::Mock => Some(Arc::new(MockCrossEncoder)),
            ServiceSpec::Http(http) => Some(Arc::new(CrossEncoderReranker::new(http.clone(), model.clone())?)),
        },
    };
    if let Some(r) = &reranker {
        let r = r.clone();
        services.push(Service::from_fn(format!("reranker ({})", r.name()), move || {
            r.probe().map_err(|e| e.to_string())
        }));
    }

    let refiner = match &cfg.refiner {
        None => None,
        Some(spec) => {
            let aux = match &spec.generator {
                Some(g) => {
                    let g = generator(g)?;
                    let probe = g.clone();
                    services.push(Service::from_fn(format!("refiner generator ({})", g.name()), move || {
                        probe.probe().map_err(|e| e.to_string())
                    }));
                    g
                }
                None => gen.clone(),
            };
            let rate = spec.rate();
            let r = match spec.kind {
                RefinerKind::Extractive => {
                    let e = spec.embedding.as_ref().ok_or_else(|| RunError::Invalid {
                        field: "refiner.embedding".into(),
                        message: "required for the extractive refiner".into(),
                    })?;
                    let client = embedding_client(e)?;
                    services.push(embedding_service("refiner embedding", &client));
                    Refiner::extractive(client, spec.token_budget, rate)
                }
                RefinerKind::Perplexity => Refiner::perplexity(aux, rate),
                RefinerKind::Abstractive => Refiner::abstractive(aux, spec.max_tokens, rate),
            };
            r.validate()?;
            Some(Arc::new(r))
        }
    };

    let judger = match &cfg.judger {
        None => None,
        Some(JudgerSpec::Skr { training, k, embedding }) => {
            let client = embedding_client(embedding)?;
            services.push(embedding_service("judger embedding", &client));
            Some((training.clone(), *k, client))
        }
    };

    Ok(Plan {
        retriever,
        reranker,
        refiner,
        judger,
        generator: gen,
        services,
    })
}

/// Probes every service and reports all failures together.
pub fn preflight(services: &[Service]) -> Result<(), RunError> {
    let failures: Vec<String> = services
        .iter()
        .filter_map(|s| s.probe().err().map(|e| format!("{}: {e}", s.name)))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(RunError::Preflight(failures))
    }
}

/// Assembled components plus the handles the runner needs afterwards.
pub struct Built {
    pub store: Arc<PassageStore>,
    pub components: Components,
    pub cache: Option<(Arc<RetrievalCache>, PathBuf)>,
    /// Fingerprint of the uncached retriever.
    pub retriever_fingerprint: String,
}

impl Plan {
    pub fn assemble(self, cfg: &ExperimentConfig) -> Result<Built, RunError> {
        let store = Arc::new(load_passages(&cfg.corpus)?);
        let base: Arc<dyn Retriever> = match self.retriever {
            RetrieverPlan::Bm25 { params, index: None } => Arc::new(Bm25Retriever::build(store.clone(), params)?),
            RetrieverPlan::Bm25 { params, index: Some(p) } => {
                let idx = InvertedIndex::load(&p)?;
                Arc::new(Bm25Retriever::with_index(store.clone(), idx, params)?)
            }
            RetrieverPlan::Dense { client, metric, vectors } => {
                let vs = match vectors {
                    Some(p) => VectorStore::load_jsonl(&p, metric)?,
                    None => build_vector_store(&store, &client, metric)?,
                };
                Arc::new(DenseRetriever::new(store.clone(), vs, client)?)
            }
            RetrieverPlan::External(p) => Arc::new(ExternalCacheRetriever::load(&p)?),
        };
        let retriever_fingerprint = base.fingerprint();
        let (retriever, cache) = match &cfg.retrieval_cache {
            Some(p) => {
                let cache = Arc::new(if p.exists() { RetrievalCache::load(p) } else { RetrievalCache::new() });
                let r: Arc<dyn Retriever> = Arc::new(CachedRetriever::new(base, cache.clone()));
                (r, Some((cache, p.clone())))
            }
            None => (base, None),
        };

        let mut components = Components::new(self.generator).with_retriever(retriever);
        if let Some(r) = self.reranker {
            components = components.with_reranker(r);
        }
        if let Some(r) = self.refiner {
            components = components.with_refiner(r);
        }
        if let Some((training, k, client)) = self.judger {
            let j: Arc<dyn Judger> = Arc::new(SkrJudger::load(&training, k, client)?);
            components = components.with_judger(j);
        }
        Ok(Built {
            store,
            components,
            cache,
            retriever_fingerprint,
        })
    }
}
