//! Retrieval-necessity judgers. The SKR-KNN judger labels a query by a
//! majority vote of its nearest training questions.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{cosine, EmbedRole, EmbeddingClient};
use crate::retrieval::RetrievalError;

pub const DEFAULT_SKR_K: usize = 5;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("training set has {size} entries, fewer than k = {k}")]
    TooSmall { size: usize, k: usize },
    #[error("k must be >= 1")]
    InvalidK,
    #[error("training embeddings have inconsistent dimensions")]
    Dimension,
    #[error("cannot read training file {path}: {message}")]
    Io { path: String, message: String },
    #[error("training file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Embedding(#[from] RetrievalError),
    #[error("judger failed: {0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Retrieve,
    NoRetrieve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position of the entry in the training set.
    pub ordinal: usize,
    pub question: String,
    pub similarity: f64,
    pub label: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub verdict: Verdict,
    #[serde(default)]
    pub neighbors: Vec<Neighbor>,
}

pub trait Judger: Send + Sync {
    fn name(&self) -> String;

    fn judge(&self, query: &str) -> Result<Judgement, JudgeError>;

    fn probe(&self) -> Result<(), JudgeError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkrEntry {
    pub question: String,
    pub vector: Vec<f32>,
    pub label: Verdict,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingLine {
    question: String,
    label: Verdict,
}

pub struct SkrJudger {
    entries: Vec<SkrEntry>,
    k: usize,
    embedder: Arc<EmbeddingClient>,
}

impl SkrJudger {
    pub fn new(entries: Vec<SkrEntry>, k: usize, embedder: Arc<EmbeddingClient>) -> Result<Self, JudgeError> {
        if k == 0 {
            return Err(JudgeError::InvalidK);
        }
        if entries.len() < k {
            return Err(JudgeError::TooSmall { size: entries.len(), k });
        }
        if let Some(first) = entries.first() {
            if entries.iter().any(|e| e.vector.len() != first.vector.len()) {
                return Err(JudgeError::Dimension);
            }
        }
        Ok(Self { entries, k, embedder })
    }

    /// Embeds labeled questions with the query role.
    pub fn from_labeled(
        labeled: Vec<(String, Verdict)>,
        k: usize,
        embedder: Arc<EmbeddingClient>,
    ) -> Result<Self, JudgeError> {
        let texts: Vec<String> = labeled.iter().map(|(q, _)| q.clone()).collect();
        let vectors = embedder.embed(&texts, EmbedRole::Query)?;
        let entries = labeled
            .into_iter()
            .zip(vectors)
            .map(|((question, label), vector)| SkrEntry { question, vector, label })
            .collect();
        Self::new(entries, k, embedder)
    }

    /// Reads JSONL `{"question", "label": "retrieve"|"no_retrieve"}`.
    pub fn load(path: &Path, k: usize, embedder: Arc<EmbeddingClient>) -> Result<Self, JudgeError> {
        let raw = fs::read_to_string(path).map_err(|e| JudgeError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut labeled = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: TrainingLine = serde_json::from_str(line).map_err(|e| JudgeError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            labeled.push((t.question, t.label));
        }
        Self::from_labeled(labeled, k, embedder)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest neighbours and majority verdict for an embedded query.
    pub fn judge_vector(&self, q: &[f32]) -> Judgement {
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(q, &e.vector)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let neighbors: Vec<Neighbor> = scored
            .into_iter()
            .take(self.k)
            .map(|(i, similarity)| Neighbor {
                ordinal: i,
                question: self.entries[i].question.clone(),
                similarity,
                label: self.entries[i].label,
            })
            .collect();
        Judgement {
            verdict: majority(neighbors.iter().map(|n| n.label)),
            neighbors,
        }
    }
}

/// Majority label; a tie retrieves.
pub fn majority(labels: impl IntoIterator<Item = Verdict>) -> Verdict {
    let (mut yes, mut no) = (0usize, 0usize);
    for l in labels {
        match l {
            Verdict::Retrieve => yes += 1,
            Verdict::NoRetrieve => no += 1,
        }
    }
    if no > yes {
        Verdict::NoRetrieve
    } else {
        Verdict::Retrieve
    }
}

impl Judger for SkrJudger {
    fn name(&self) -> String {
        format!("skr_knn:k={}:{}", self.k, self.embedder.describe())
    }

    fn judge(&self, query: &str) -> Result<Judgement, JudgeError> {
        let q = self.embedder.embed_one(query, EmbedRole::Query)?;
        Ok(self.judge_vector(&q))
    }

    fn probe(&self) -> Result<(), JudgeError> {
        Ok(self.embedder.probe()?)
    }
}

type JudgeFn = dyn Fn(&str) -> Result<Verdict, JudgeError> + Send + Sync;

/// Judger backed by a closure; useful for scripted runs and tests.
pub struct FnJudger {
    f: Box<JudgeFn>,
}

impl FnJudger {
    pub fn new(f: impl Fn(&str) -> Result<Verdict, JudgeError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }
}

impl Judger for FnJudger {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn judge(&self, query: &str) -> Result<Judgement, JudgeError> {
        Ok(Judgement {
            verdict: (self.f)(query)?,
            neighbors: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::EmbeddingClientConfig;
    use crate::mock::HashEmbedder;
    use Verdict::*;

    fn client() -> Arc<EmbeddingClient> {
        Arc::new(EmbeddingClient::new(EmbeddingClientConfig::new("hash"), Arc::new(HashEmbedder::default())).unwrap())
    }

    fn axis_entries(labels: &[(Vec<f32>, Verdict)]) -> Vec<SkrEntry> {
        labels
            .iter()
            .enumerate()
            .map(|(i, (v, l))| SkrEntry {
                question: format!("q{i}"),
                vector: v.clone(),
                label: *l,
            })
            .collect()
    }

    #[test]
    fn majority_and_tie() {
        assert_eq!(majority([Retrieve, Retrieve, NoRetrieve]), Retrieve);
        assert_eq!(majority([Retrieve, NoRetrieve]), Retrieve);
        assert_eq!(majority([NoRetrieve, NoRetrieve, Retrieve]), NoRetrieve);
    }

    #[test]
    fn exact_match_neighbor_wins_at_k1() {
        let j = SkrJudger::from_labeled(
            vec![
                ("who wrote hamlet".into(), NoRetrieve),
                ("capital of the moon colony".into(), Retrieve),
            ],
            1,
            client(),
        )
        .unwrap();
        let out = j.judge("who wrote hamlet").unwrap();
        assert_eq!(out.verdict, NoRetrieve);
        assert_eq!(out.neighbors[0].ordinal, 0);
        assert!((out.neighbors[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn too_small_training_set() {
        assert!(matches!(
            SkrJudger::new(Vec::new(), 1, client()),
            Err(JudgeError::TooSmall { size: 0, k: 1 })
        ));
    }

    #[test]
    fn neighbors_sorted_by_similarity_then_ordinal() {
        let entries = axis_entries(&[
            (vec![0.0, 1.0], Retrieve),
            (vec![1.0, 0.0], NoRetrieve),
            (vec![1.0, 0.0], NoRetrieve),
        ]);
        let j = SkrJudger::new(entries, 3, client()).unwrap();
        let out = j.judge_vector(&[1.0, 0.0]);
        let ords: Vec<usize> = out.neighbors.iter().map(|n| n.ordinal).collect();
        assert_eq!(ords, vec![1, 2, 0]);
        assert_eq!(out.verdict, NoRetrieve);
    }
}
