//! Embedding-service client and exact (flat) vector search.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageStore};
use crate::retrieval::{RetrievalError, Retriever, ScoredPassage, TopK};
use crate::transport::{HttpSettings, HttpTransport};

/// Default number of texts per embedding request.
pub const DEFAULT_EMBED_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRole {
    Query,
    Passage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    InnerProduct,
    #[default]
    Cosine,
}

/// One request to an embedding service: texts in, one vector per text out.
pub trait EmbeddingBackend: Send + Sync {
    fn describe(&self) -> String;

    fn embed_batch(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError>;

    fn probe(&self) -> Result<(), RetrievalError> {
        Ok(())
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// OpenAI-compatible `/embeddings` backend.
pub struct HttpEmbeddingBackend {
    transport: HttpTransport,
}

impl HttpEmbeddingBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, RetrievalError> {
        Ok(Self {
            transport: HttpTransport::new(settings)?,
        })
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn describe(&self) -> String {
        format!("http:{}", self.transport.endpoint())
    }

    fn embed_batch(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        let resp: EmbeddingResponse = self.transport.post_json(&EmbeddingRequest { model, input: inputs })?;
        if resp.data.len() != inputs.len() {
            return Err(RetrievalError::Embedding(format!(
                "service returned {} vectors for {} inputs",
                resp.data.len(),
                inputs.len()
            )));
        }
        let mut out = vec![Vec::new(); inputs.len()];
        for d in resp.data {
            let slot = out.get_mut(d.index).ok_or_else(|| {
                RetrievalError::Embedding(format!("response index {} out of range", d.index))
            })?;
            *slot = d.embedding;
        }
        Ok(out)
    }

    fn probe(&self) -> Result<(), RetrievalError> {
        Ok(self.transport.probe()?)
    }
}

fn default_batch() -> usize {
    DEFAULT_EMBED_BATCH
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingClientConfig {
    pub model: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub query_prefix: String,
    #[serde(default)]
    pub passage_prefix: String,
    /// Maximum number of batch requests in flight at once.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl EmbeddingClientConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            batch_size: DEFAULT_EMBED_BATCH,
            query_prefix: String::new(),
            passage_prefix: String::new(),
            parallelism: 1,
        }
    }
}

/// Prefixes, batches and validates embedding requests.
pub struct EmbeddingClient {
    config: EmbeddingClientConfig,
    backend: Arc<dyn EmbeddingBackend>,
    requests: AtomicU64,
}

impl EmbeddingClient {
    pub fn new(config: EmbeddingClientConfig, backend: Arc<dyn EmbeddingBackend>) -> Result<Self, RetrievalError> {
        if config.batch_size == 0 {
            return Err(RetrievalError::Embedding("batch_size must be >= 1".into()));
        }
        Ok(Self {
            config,
            backend,
            requests: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EmbeddingClientConfig {
        &self.config
    }

    pub fn describe(&self) -> String {
        format!("{}@{}", self.config.model, self.backend.describe())
    }

    /// Number of backend requests issued so far.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn probe(&self) -> Result<(), RetrievalError> {
        self.backend.probe()
    }

    pub fn embed(&self, texts: &[String], role: EmbedRole) -> Result<Vec<Vec<f32>>, RetrievalError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let prefix = match role {
            EmbedRole::Query => &self.config.query_prefix,
            EmbedRole::Passage => &self.config.passage_prefix,
        };
        let prefixed: Vec<String> = texts.iter().map(|t| format!("{prefix}{t}")).collect();
        let batches: Vec<&[String]> = prefixed.chunks(self.config.batch_size).collect();
        let run = |batch: &&[String]| {
            self.requests.fetch_add(1, Ordering::Relaxed);
            let out = self.backend.embed_batch(&self.config.model, batch)?;
            if out.len() != batch.len() {
                return Err(RetrievalError::Embedding(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    out.len()
                )));
            }
            Ok(out)
        };
        let results: Vec<Result<Vec<Vec<f32>>, RetrievalError>> = if self.config.parallelism > 1 && batches.len() > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.parallelism)
                .build()
                .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
            pool.install(|| batches.par_iter().map(run).collect())
        } else {
            batches.iter().map(run).collect()
        };
        let mut vectors = Vec::with_capacity(texts.len());
        for r in results {
            vectors.extend(r?);
        }
        if let Some(dim) = vectors.first().map(Vec::len) {
            if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: bad.len(),
                });
            }
        }
        Ok(vectors)
    }

    pub fn embed_one(&self, text: &str, role: EmbedRole) -> Result<Vec<f32>, RetrievalError> {
        Ok(self.embed(&[text.to_string()], role)?.remove(0))
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = l2_norm(v);
    if n == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    true
}

/// Row-major matrix of passage vectors searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    metric: Metric,
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    id: String,
    vector: Vec<f32>,
}

impl VectorStore {
    /// Builds a store from `(id, vector)` rows. Cosine stores are normalized.
    pub fn from_rows(rows: Vec<(String, Vec<f32>)>, metric: Metric) -> Result<Self, RetrievalError> {
        let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, mut v) in rows {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if metric == Metric::Cosine && !normalize_in_place(&mut v) {
                log::warn!("passage `{id}` has a zero embedding; it scores 0 under cosine");
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Ok(Self { dim, ids, data, metric })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Reads precomputed `{"id", "vector"}` lines.
    pub fn load_jsonl(path: &Path, metric: Metric) -> Result<Self, RetrievalError> {
        let io = |e: std::io::Error| RetrievalError::CacheIo(format!("{}: {e}", path.display()));
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let v: VectorLine = serde_json::from_str(&line)
                .map_err(|e| RetrievalError::CacheIo(format!("{} line {}: {e}", path.display(), i + 1)))?;
            rows.push((v.id, v.vector));
        }
        Self::from_rows(rows, metric)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |e: std::io::Error| RetrievalError::CacheIo(format!("{}: {e}", path.display()));
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for (i, id) in self.ids.iter().enumerate() {
            let line = VectorLine {
                id: id.clone(),
                vector: self.row(i).to_vec(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).unwrap()).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Embeds every passage (in corpus order) and builds the flat store.
pub fn build_vector_store(
    store: &PassageStore,
    client: &EmbeddingClient,
    metric: Metric,
) -> Result<VectorStore, RetrievalError> {
    let texts: Vec<String> = store.iter().map(|p| p.contents.clone()).collect();
    let vectors = client.embed(&texts, EmbedRole::Passage)?;
    let rows = store.iter().map(|p| p.id.clone()).zip(vectors).collect();
    VectorStore::from_rows(rows, metric)
}

/// Exact top-k by the store metric, ties by passage id.
pub fn dense_search(vs: &VectorStore, query: &[f32], k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
    if query.len() != vs.dim && !vs.is_empty() {
        return Err(RetrievalError::DimensionMismatch {
            expected: vs.dim,
            got: query.len(),
        });
    }
    let mut q = query.to_vec();
    if vs.metric == Metric::Cosine {
        normalize_in_place(&mut q);
    }
    let mut top = TopK::new(k);
    for (i, id) in vs.ids.iter().enumerate() {
        top.push(i, id, dot(vs.row(i), &q));
    }
    Ok(top.into_ranked().into_iter().map(|(_, h)| h).collect())
}

/// Dense retriever: embeds the query through the client, then flat search.
pub struct DenseRetriever {
    passages: Arc<PassageStore>,
    vectors: VectorStore,
    client: Arc<EmbeddingClient>,
}

impl DenseRetriever {
    pub fn new(
        passages: Arc<PassageStore>,
        vectors: VectorStore,
        client: Arc<EmbeddingClient>,
    ) -> Result<Self, RetrievalError> {
        if let Some(missing) = vectors.ids().iter().find(|id| passages.get(id).is_none()) {
            return Err(RetrievalError::UnknownPassage(missing.clone()));
        }
        Ok(Self {
            passages,
            vectors,
            client,
        })
    }

    pub fn vectors(&self) -> &VectorStore {
        &self.vectors
    }
}

impl Retriever for DenseRetriever {
    fn fingerprint(&self) -> String {
        format!(
            "dense:{}:{:?}:{}",
            self.client.config().model,
            self.vectors.metric,
            self.passages.fingerprint()
        )
    }

    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
        let q = self.client.embed_one(query, EmbedRole::Query)?;
        dense_search(&self.vectors, &q, top_k)
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Recording {
        dim: usize,
        seen: Mutex<Vec<Vec<String>>>,
    }

    impl EmbeddingBackend for Recording {
        fn describe(&self) -> String {
            "recording".into()
        }

        fn embed_batch(&self, _model: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
            self.seen.lock().unwrap().push(inputs.to_vec());
            Ok(inputs.iter().map(|t| vec![t.len() as f32; self.dim]).collect())
        }
    }

    fn client(batch: usize, prefix: &str) -> (Arc<Recording>, EmbeddingClient) {
        let backend = Arc::new(Recording {
            dim: 2,
            seen: Mutex::new(Vec::new()),
        });
        let mut cfg = EmbeddingClientConfig::new("e5-base-v2");
        cfg.batch_size = batch;
        cfg.query_prefix = prefix.to_string();
        cfg.passage_prefix = "passage: ".into();
        (backend.clone(), EmbeddingClient::new(cfg, backend).unwrap())
    }

    #[test]
    fn batches_by_ceiling_division() {
        let (backend, c) = client(1024, "");
        let texts: Vec<String> = (0..2500).map(|i| i.to_string()).collect();
        let out = c.embed(&texts, EmbedRole::Passage).unwrap();
        assert_eq!(out.len(), 2500);
        assert_eq!(c.request_count(), 3);
        assert_eq!(backend.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn query_prefix_is_prepended() {
        let (backend, c) = client(8, "query: ");
        c.embed(&["who".to_string()], EmbedRole::Query).unwrap();
        assert_eq!(backend.seen.lock().unwrap()[0], vec!["query: who"]);
    }

    #[test]
    fn empty_input_issues_no_requests() {
        let (_, c) = client(8, "");
        assert!(c.embed(&[], EmbedRole::Query).unwrap().is_empty());
        assert_eq!(c.request_count(), 0);
    }

    #[test]
    fn parallel_batches_keep_order() {
        let (_, mut c) = client(3, "");
        c.config.parallelism = 4;
        let texts: Vec<String> = (0..20).map(|i| "x".repeat(i + 1)).collect();
        let out = c.embed(&texts, EmbedRole::Query).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert_eq!(v[0], (i + 1) as f32);
        }
    }

    fn basis() -> VectorStore {
        VectorStore::from_rows(
            vec![
                ("r1".into(), vec![1.0, 0.0, 0.0]),
                ("r2".into(), vec![0.0, 1.0, 0.0]),
                ("r3".into(), vec![0.0, 0.0, 1.0]),
            ],
            Metric::InnerProduct,
        )
        .unwrap()
    }

    #[test]
    fn basis_query_hits_matching_row() {
        let hits = dense_search(&basis(), &[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(hits[0].passage_id, "r2");
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(dense_search(&basis(), &[0.0, 1.0, 0.0], 10).unwrap().len(), 3);
    }

    #[test]
    fn cosine_rows_are_unit_norm() {
        let vs = VectorStore::from_rows(
            vec![("a".into(), vec![3.0, 4.0]), ("b".into(), vec![0.5, 0.0])],
            Metric::Cosine,
        )
        .unwrap();
        for i in 0..vs.len() {
            assert!((l2_norm(vs.row(i)) - 1.0).abs() < 1e-6);
        }
        let hits = dense_search(&vs, &[0.6, 0.8], 1).unwrap();
        assert_eq!(hits[0].passage_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inner_product_leaves_rows_unscaled() {
        let vs = VectorStore::from_rows(vec![("a".into(), vec![3.0, 4.0])], Metric::InnerProduct).unwrap();
        assert_eq!(vs.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(matches!(
            dense_search(&basis(), &[1.0, 0.0], 1),
            Err(RetrievalError::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(VectorStore::from_rows(
            vec![("a".into(), vec![1.0]), ("b".into(), vec![1.0, 2.0])],
            Metric::Cosine
        )
        .is_err());
    }

    #[test]
    fn vectors_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        basis().save_jsonl(&path).unwrap();
        assert_eq!(VectorStore::load_jsonl(&path, Metric::InnerProduct).unwrap(), basis());
    }

    #[test]
    fn build_store_in_corpus_order() {
        let (_, c) = client(2, "");
        let store = PassageStore::from_passages(vec![
            Passage::new("p1", "", "a"),
            Passage::new("p2", "", "bb"),
            Passage::new("p3", "", "ccc"),
        ])
        .unwrap();
        let vs = build_vector_store(&store, &c, Metric::InnerProduct).unwrap();
        assert_eq!(vs.ids(), &["p1", "p2", "p3"]);
        assert_eq!(vs.row(2)[0], "passage: ccc".len() as f32);
    }
}
