//! Offline index builds into a directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::build::{embedding_client, preflight, Service};
use super::config::EmbeddingSpec;
use super::{write_json, RunError};
use crate::corpus::{load_corpus, PassageStore};
use crate::dense::{build_vector_store, Metric as VectorMetric};
use crate::sparse::{build_index, SimpleAnalyzer};

pub const BM25_INDEX_FILE: &str = "bm25.postings.jsonl";
pub const VECTORS_FILE: &str = "vectors.jsonl";
pub const INDEX_META_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndexKind {
    Bm25,
    Dense {
        embedding: EmbeddingSpec,
        #[serde(default)]
        metric: VectorMetric,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    #[serde(rename = "type")]
    pub kind: String,
    pub corpus: PathBuf,
    pub corpus_fingerprint: String,
    pub passage_count: usize,
    /// Main index file, relative to the output directory.
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

/// Builds the index for `corpus` into `out` and writes `index.json` next to it.
pub fn build_index_dir(kind: &IndexKind, corpus: &Path, out: &Path) -> Result<IndexSummary, RunError> {
    let store: PassageStore = load_corpus(corpus)?;
    fs::create_dir_all(out).map_err(|e| RunError::Io {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let summary = match kind {
        IndexKind::Bm25 => {
            let idx = build_index(&store, &SimpleAnalyzer);
            idx.save(&out.join(BM25_INDEX_FILE))?;
            IndexSummary {
                kind: "bm25".into(),
                corpus: corpus.to_path_buf(),
                corpus_fingerprint: store.fingerprint().to_string(),
                passage_count: store.len(),
                file: BM25_INDEX_FILE.into(),
                vocabulary_size: Some(idx.vocabulary_size()),
                dim: None,
            }
        }
        IndexKind::Dense { embedding, metric } => {
            let client = embedding_client(embedding)?;
            let probe = client.clone();
            preflight(&[Service::from_fn(format!("embedding ({})", client.describe()), move || {
                probe.probe().map_err(|e| e.to_string())
            })])?;
            let vs = build_vector_store(&store, &client, *metric)?;
            vs.save_jsonl(&out.join(VECTORS_FILE))?;
            IndexSummary {
                kind: "dense".into(),
                corpus: corpus.to_path_buf(),
                corpus_fingerprint: store.fingerprint().to_string(),
                passage_count: store.len(),
                file: VECTORS_FILE.into(),
                vocabulary_size: None,
                dim: Some(vs.dim()),
            }
        }
    };
    write_json(&out.join(INDEX_META_FILE), &summary)?;
    Ok(summary)
}
