//! The retriever contract shared by the sparse and dense backends, the
//! retrieval cache and the reranking decorator.

mod cache;
mod rerank;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;
use crate::transport::TransportError;

pub use cache::{normalize_query, CachedRetriever, ExternalCacheRetriever, RetrievalCache};
pub use rerank::{
    rerank, BiEncoderReranker, CrossEncoderReranker, RerankedRetriever, Reranker,
};

/// Default number of passages retrieved per query.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("top_k must be >= 1")]
    InvalidTopK,
    #[error("retriever is not initialized: {0}")]
    NotInitialized(String),
    #[error("query not present in external retrieval cache: `{0}`")]
    NotCached(String),
    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reranker failed: {0}")]
    Reranker(String),
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cache io error: {0}")]
    CacheIo(String),
}

/// One retrieval hit. Ranks are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalRequest {
    pub query: String,
    pub top_k: usize,
}

impl RetrievalRequest {
    pub fn new(query: impl Into<String>, top_k: usize) -> Result<Self, RetrievalError> {
        if top_k == 0 {
            return Err(RetrievalError::InvalidTopK);
        }
        Ok(Self {
            query: query.into(),
            top_k,
        })
    }
}

/// A hit resolved against its passage text; the form recorded in traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub id: String,
    pub title: String,
    pub contents: String,
    pub score: f64,
    pub rank: usize,
}

pub trait Retriever: Send + Sync {
    /// Identifies backend + corpus + parameters; cache keys include it.
    fn fingerprint(&self) -> String;

    /// Top-k hits ordered by score descending, then passage id ascending.
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError>;

    fn passage(&self, id: &str) -> Option<&Passage>;
}

pub fn retrieve(
    backend: &dyn Retriever,
    req: &RetrievalRequest,
) -> Result<Vec<ScoredPassage>, RetrievalError> {
    if req.top_k == 0 {
        return Err(RetrievalError::InvalidTopK);
    }
    let hits = backend.search(&req.query, req.top_k)?;
    debug_assert!(hits.len() <= req.top_k);
    Ok(hits)
}

pub fn resolve(
    backend: &dyn Retriever,
    hits: &[ScoredPassage],
) -> Result<Vec<RetrievedPassage>, RetrievalError> {
    hits.iter()
        .map(|h| {
            let p = backend
                .passage(&h.passage_id)
                .ok_or_else(|| RetrievalError::UnknownPassage(h.passage_id.clone()))?;
            Ok(RetrievedPassage {
                id: p.id.clone(),
                title: p.title.clone(),
                contents: p.contents.clone(),
                score: h.score,
                rank: h.rank,
            })
        })
        .collect()
}

/// Result ordering: higher score first, ties by ascending passage id.
pub fn hit_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Sorts `(id, score)` pairs by [`hit_order`], truncates to `k` and assigns ranks.
pub fn rank_hits(mut scored: Vec<(String, f64)>, k: usize) -> Vec<ScoredPassage> {
    scored.sort_by(|a, b| hit_order(a.1, &a.0, b.1, &b.0));
    scored.truncate(k);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (passage_id, score))| ScoredPassage {
            passage_id,
            score,
            rank: i + 1,
        })
        .collect()
}

struct HeapEntry<'a> {
    score: f64,
    id: &'a str,
    slot: usize,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    // Better hits compare as Less, so the max-heap top is the worst kept hit.
    fn cmp(&self, other: &Self) -> Ordering {
        hit_order(self.score, self.id, other.score, other.id)
    }
}

/// Bounded top-k selection over `(slot, id, score)` candidates.
pub(crate) struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<HeapEntry<'a>>,
}

impl<'a> TopK<'a> {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub(crate) fn push(&mut self, slot: usize, id: &'a str, score: f64) {
        if self.k == 0 {
            return;
        }
        let entry = HeapEntry { score, id, slot };
        if self.heap.len() < self.k {
            self.heap.push(entry);
        } else if let Some(worst) = self.heap.peek() {
            if entry.cmp(worst) == Ordering::Less {
                self.heap.pop();
                self.heap.push(entry);
            }
        }
    }

    pub(crate) fn into_ranked(self) -> Vec<(usize, ScoredPassage)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                (
                    e.slot,
                    ScoredPassage {
                        passage_id: e.id.to_string(),
                        score: e.score,
                        rank: i + 1,
                    },
                )
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::corpus::PassageStore;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    /// Scores passages by the number of query words they contain; counts calls.
    pub struct CountingRetriever {
        pub store: PassageStore,
        pub calls: AtomicUsize,
        pub tag: String,
    }

    impl CountingRetriever {
        pub fn new(passages: Vec<Passage>) -> Self {
            Self {
                store: PassageStore::from_passages(passages).unwrap(),
                calls: AtomicUsize::new(0),
                tag: "counting".into(),
            }
        }

        pub fn calls(&self) -> usize {
            self.calls.load(AtomicOrdering::SeqCst)
        }
    }

    impl Retriever for CountingRetriever {
        fn fingerprint(&self) -> String {
            self.tag.clone()
        }

        fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
            self.calls.fetch_add(1, AtomicOrdering::SeqCst);
            let words: Vec<&str> = query.split_whitespace().collect();
            let scored = self
                .store
                .iter()
                .map(|p| {
                    let s = p
                        .contents
                        .split_whitespace()
                        .filter(|w| words.contains(w))
                        .count() as f64;
                    (p.id.clone(), s)
                })
                .filter(|(_, s)| *s > 0.0)
                .collect();
            Ok(rank_hits(scored, top_k))
        }

        fn passage(&self, id: &str) -> Option<&Passage> {
            self.store.get(id)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::CountingRetriever;
    use super::*;

    fn corpus() -> CountingRetriever {
        CountingRetriever::new(vec![
            Passage::new("p2", "", "apple banana"),
            Passage::new("p1", "", "apple"),
            Passage::new("p3", "", "apple banana cherry"),
        ])
    }

    #[test]
    fn corpus_bounded_results() {
        let r = corpus();
        let hits = retrieve(&r, &RetrievalRequest::new("apple", 5).unwrap()).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn top_one_is_argmax() {
        let r = corpus();
        let hits = retrieve(&r, &RetrievalRequest::new("apple banana cherry", 1).unwrap()).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].passage_id, "p3");
    }

    #[test]
    fn equal_scores_order_by_id() {
        let r = corpus();
        let hits = retrieve(&r, &RetrievalRequest::new("apple", 3).unwrap()).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.passage_id.as_str()).collect::<Vec<_>>(),
            vec!["p1", "p2", "p3"]
        );
    }

    #[test]
    fn zero_top_k_rejected() {
        assert!(matches!(RetrievalRequest::new("q", 0), Err(RetrievalError::InvalidTopK)));
    }

    #[test]
    fn heap_top_k_matches_full_sort() {
        let ids: Vec<String> = (0..50).map(|i| format!("d{i:02}")).collect();
        let scores: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        for k in [1, 3, 10, 50, 80] {
            let mut top = TopK::new(k);
            for (i, id) in ids.iter().enumerate() {
                top.push(i, id, scores[i]);
            }
            let got: Vec<_> = top.into_ranked().into_iter().map(|(_, h)| h).collect();
            let want = rank_hits(ids.iter().cloned().zip(scores.iter().copied()).collect(), k);
            assert_eq!(got, want);
        }
    }
}
