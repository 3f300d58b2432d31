use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{hit_order, RetrievalError, RetrievedPassage, Retriever, ScoredPassage};
use crate::corpus::Passage;
use crate::dense::{cosine, EmbedRole, EmbeddingClient};
use crate::transport::{HttpSettings, HttpTransport};

/// Second-stage scorer over already retrieved candidates.
pub trait Reranker: Send + Sync {
    fn name(&self) -> String;

    /// One score per candidate, in candidate order.
    fn score(&self, query: &str, candidates: &[RetrievedPassage]) -> Result<Vec<f64>, RetrievalError>;

    fn probe(&self) -> Result<(), RetrievalError> {
        Ok(())
    }
}

/// Replaces candidate scores with reranker scores and re-sorts. The output is
/// a permutation of the input.
pub fn rerank(
    scorer: &dyn Reranker,
    query: &str,
    candidates: Vec<RetrievedPassage>,
) -> Result<Vec<RetrievedPassage>, RetrievalError> {
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let scores = scorer.score(query, &candidates)?;
    if scores.len() != candidates.len() {
        return Err(RetrievalError::Reranker(format!(
            "{} returned {} scores for {} candidates",
            scorer.name(),
            scores.len(),
            candidates.len()
        )));
    }
    let mut out: Vec<RetrievedPassage> = candidates
        .into_iter()
        .zip(scores)
        .map(|(mut p, s)| {
            p.score = s;
            p
        })
        .collect();
    out.sort_by(|a, b| hit_order(a.score, &a.id, b.score, &b.id));
    for (i, p) in out.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    Ok(out)
}

/// Scores by cosine between the query embedding and each passage embedding.
pub struct BiEncoderReranker {
    client: Arc<EmbeddingClient>,
}

impl BiEncoderReranker {
    pub fn new(client: Arc<EmbeddingClient>) -> Self {
        Self { client }
    }
}

impl Reranker for BiEncoderReranker {
    fn name(&self) -> String {
        format!("bi_encoder:{}", self.client.describe())
    }

    fn score(&self, query: &str, candidates: &[RetrievedPassage]) -> Result<Vec<f64>, RetrievalError> {
        let q = self.client.embed_one(query, EmbedRole::Query)?;
        let texts: Vec<String> = candidates.iter().map(|c| c.contents.clone()).collect();
        let vs = self.client.embed(&texts, EmbedRole::Passage)?;
        Ok(vs.iter().map(|v| cosine(&q, v)).collect())
    }

    fn probe(&self) -> Result<(), RetrievalError> {
        self.client.probe()
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    model: &'a str,
    query: &'a str,
    documents: Vec<&'a str>,
}

#[derive(Deserialize)]
struct RerankResponse {
    results: Vec<RerankResult>,
}

#[derive(Deserialize)]
struct RerankResult {
    index: usize,
    relevance_score: f64,
}

/// Remote cross-encoder behind a `/rerank` route:
/// `{"model","query","documents"}` in, `{"results":[{"index","relevance_score"}]}` out.
pub struct CrossEncoderReranker {
    transport: HttpTransport,
    model: String,
}

impl CrossEncoderReranker {
    pub fn new(settings: HttpSettings, model: impl Into<String>) -> Result<Self, RetrievalError> {
        Ok(Self {
            transport: HttpTransport::new(settings)?,
            model: model.into(),
        })
    }
}

impl Reranker for CrossEncoderReranker {
    fn name(&self) -> String {
        format!("cross_encoder:{}@{}", self.model, self.transport.endpoint())
    }

    fn score(&self, query: &str, candidates: &[RetrievedPassage]) -> Result<Vec<f64>, RetrievalError> {
        let req = RerankRequest {
            model: &self.model,
            query,
            documents: candidates.iter().map(|c| c.contents.as_str()).collect(),
        };
        let resp: RerankResponse = self.transport.post_json(&req)?;
        let mut scores = vec![None; candidates.len()];
        for r in resp.results {
            match scores.get_mut(r.index) {
                Some(slot) => *slot = Some(r.relevance_score),
                None => {
                    return Err(RetrievalError::Reranker(format!("result index {} out of range", r.index)))
                }
            }
        }
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| RetrievalError::Reranker(format!("no score for candidate {i}"))))
            .collect()
    }

    fn probe(&self) -> Result<(), RetrievalError> {
        Ok(self.transport.probe()?)
    }
}

/// Retriever decorator: retrieve, then rerank the candidates. When
/// `fallback_to_original` is set, a reranker failure keeps retrieval order.
pub struct RerankedRetriever {
    inner: Arc<dyn Retriever>,
    reranker: Arc<dyn Reranker>,
    fallback_to_original: bool,
}

impl RerankedRetriever {
    pub fn new(inner: Arc<dyn Retriever>, reranker: Arc<dyn Reranker>, fallback_to_original: bool) -> Self {
        Self {
            inner,
            reranker,
            fallback_to_original,
        }
    }
}

impl Retriever for RerankedRetriever {
    fn fingerprint(&self) -> String {
        format!("{}+rerank:{}", self.inner.fingerprint(), self.reranker.name())
    }

    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
        let hits = self.inner.search(query, top_k)?;
        let resolved = super::resolve(self.inner.as_ref(), &hits)?;
        match rerank(self.reranker.as_ref(), query, resolved) {
            Ok(reranked) => Ok(reranked
                .into_iter()
                .map(|p| ScoredPassage {
                    passage_id: p.id,
                    score: p.score,
                    rank: p.rank,
                })
                .collect()),
            Err(e) if self.fallback_to_original => {
                log::warn!("reranker failed ({e}); keeping retrieval order");
                Ok(hits)
            }
            Err(e) => Err(e),
        }
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.inner.passage(id)
    }
}
