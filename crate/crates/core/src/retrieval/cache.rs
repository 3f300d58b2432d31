use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{rank_hits, RetrievalError, RetrievalRequest, Retriever, ScoredPassage};
use crate::corpus::Passage;

/// Cache-key normalization: trim and collapse internal whitespace. Case is kept.
pub fn normalize_query(query: &str) -> String {
    query.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
struct Entry {
    k: usize,
    results: Vec<ScoredPassage>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    query: String,
    backend: String,
    k: usize,
    results: Vec<CacheHit>,
}

#[derive(Serialize, Deserialize)]
struct CacheHit {
    id: String,
    score: f64,
}

/// Raw retrieval results keyed by backend fingerprint and normalized query.
/// Each key keeps the largest k requested so far; smaller requests are
/// served as prefixes.
#[derive(Debug, Default)]
pub struct RetrievalCache {
    entries: RwLock<HashMap<(String, String), Entry>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl RetrievalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, backend: &str, query: &str, k: usize) -> Option<Vec<ScoredPassage>> {
        let entries = self.entries.read().unwrap();
        let entry = entries.get(&(backend.to_string(), query.to_string()))?;
        (entry.k >= k).then(|| entry.results.iter().take(k).cloned().collect())
    }

    fn store(&self, backend: String, query: String, k: usize, results: Vec<ScoredPassage>) {
        let mut entries = self.entries.write().unwrap();
        let slot = entries.entry((backend, query)).or_insert(Entry {
            k: 0,
            results: Vec::new(),
        });
        if k >= slot.k {
            *slot = Entry { k, results };
        }
    }

    /// Serves from the cache when a stored entry covers `req.top_k`; otherwise
    /// calls the backend and stores the result.
    pub fn cached_retrieve(
        &self,
        backend: &dyn Retriever,
        req: &RetrievalRequest,
    ) -> Result<Vec<ScoredPassage>, RetrievalError> {
        let fingerprint = backend.fingerprint();
        let query = normalize_query(&req.query);
        if let Some(hit) = self.lookup(&fingerprint, &query, req.top_k) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let results = super::retrieve(backend, req)?;
        self.store(fingerprint, query, req.top_k, results.clone());
        Ok(results)
    }

    /// Loads a cache file. Unreadable or corrupt lines are skipped with a warning.
    pub fn load(path: &Path) -> Self {
        let cache = Self::new();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("retrieval cache {} unreadable ({e}); starting empty", path.display());
                return cache;
            }
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let parsed = line
                .map_err(|e| e.to_string())
                .and_then(|l| serde_json::from_str::<CacheLine>(&l).map_err(|e| e.to_string()));
            match parsed {
                Ok(entry) => {
                    let results = entry
                        .results
                        .into_iter()
                        .enumerate()
                        .map(|(r, h)| ScoredPassage {
                            passage_id: h.id,
                            score: h.score,
                            rank: r + 1,
                        })
                        .collect();
                    cache.store(entry.backend, normalize_query(&entry.query), entry.k, results);
                }
                Err(e) => log::warn!(
                    "retrieval cache {}: ignoring corrupt line {}: {e}",
                    path.display(),
                    i + 1
                ),
            }
        }
        cache
    }

    /// Writes entries sorted by (backend, query) so output is deterministic.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |e: std::io::Error| RetrievalError::CacheIo(format!("{}: {e}", path.display()));
        let entries = self.entries.read().unwrap();
        let mut keys: Vec<_> = entries.keys().collect();
        keys.sort();
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for key in keys {
            let entry = &entries[key];
            let line = CacheLine {
                query: key.1.clone(),
                backend: key.0.clone(),
                k: entry.k,
                results: entry
                    .results
                    .iter()
                    .map(|h| CacheHit {
                        id: h.passage_id.clone(),
                        score: h.score,
                    })
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).unwrap()).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Retriever decorator that routes every search through a shared cache.
pub struct CachedRetriever {
    inner: Arc<dyn Retriever>,
    cache: Arc<RetrievalCache>,
}

impl CachedRetriever {
    pub fn new(inner: Arc<dyn Retriever>, cache: Arc<RetrievalCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &Arc<RetrievalCache> {
        &self.cache
    }
}

impl Retriever for CachedRetriever {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
        self.cache
            .cached_retrieve(self.inner.as_ref(), &RetrievalRequest::new(query, top_k)?)
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.inner.passage(id)
    }
}

#[derive(Deserialize)]
struct ExternalHit {
    id: String,
    #[serde(default)]
    title: String,
    contents: String,
    score: f64,
}

/// Serves results produced by an external (possibly closed) retriever from a
/// file mapping each query to `[{id, contents, score}]`. Accepts either one
/// JSON object for the whole file or one object per line.
pub struct ExternalCacheRetriever {
    fingerprint: String,
    results: HashMap<String, Vec<ScoredPassage>>,
    passages: HashMap<String, Passage>,
}

impl ExternalCacheRetriever {
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RetrievalError::CacheIo(format!("{}: {e}", path.display())))?;
        let fingerprint = format!("external:{}", hex::encode(&Sha256::digest(raw.as_bytes())[..8]));
        let objects: Vec<serde_json::Map<String, Value>> =
            match serde_json::from_str::<serde_json::Map<String, Value>>(&raw) {
                Ok(obj) => vec![obj],
                Err(_) => raw
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .enumerate()
                    .map(|(i, l)| {
                        serde_json::from_str(l).map_err(|e| {
                            RetrievalError::CacheIo(format!("{} line {}: {e}", path.display(), i + 1))
                        })
                    })
                    .collect::<Result<_, _>>()?,
            };
        let mut results = HashMap::new();
        let mut passages = HashMap::new();
        for obj in objects {
            for (query, hits) in obj {
                let hits: Vec<ExternalHit> = serde_json::from_value(hits).map_err(|e| {
                    RetrievalError::CacheIo(format!("{}: query `{query}`: {e}", path.display()))
                })?;
                let mut scored = Vec::with_capacity(hits.len());
                for h in hits {
                    scored.push((h.id.clone(), h.score));
                    passages
                        .entry(h.id.clone())
                        .or_insert_with(|| Passage::new(h.id, h.title, h.contents));
                }
                let n = scored.len();
                results.insert(normalize_query(&query), rank_hits(scored, n));
            }
        }
        Ok(Self {
            fingerprint,
            results,
            passages,
        })
    }

    pub fn query_count(&self) -> usize {
        self.results.len()
    }
}

impl Retriever for ExternalCacheRetriever {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
        let key = normalize_query(query);
        let hits = self
            .results
            .get(&key)
            .ok_or(RetrievalError::NotCached(key))?;
        Ok(hits.iter().take(top_k).cloned().collect())
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }
}
