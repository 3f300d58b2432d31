//! Inverted index with Okapi BM25 scoring.
//!
//! Scoring uses `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))` and
//! `tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))`, summed over the
//! query terms (repeated query terms count once per occurrence).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, PassageStore};
use crate::retrieval::{RetrievalError, Retriever, ScoredPassage, TopK};

pub const INDEX_FORMAT: &str = "ragforge-bm25-postings";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),
    #[error("index io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("index file {path} line {line}: {message}")]
    Format { path: String, line: usize, message: String },
}

pub trait Analyzer: Send + Sync {
    fn name(&self) -> &str;
    fn analyze(&self, text: &str) -> Vec<String>;
}

/// Lowercase, drop punctuation, split on whitespace. No stemming or stopwords.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleAnalyzer;

impl Analyzer for SimpleAnalyzer {
    fn name(&self) -> &str {
        "simple"
    }

    fn analyze(&self, text: &str) -> Vec<String> {
        let cleaned: String = text
            .chars()
            .filter(|c| c.is_alphanumeric() || c.is_whitespace())
            .flat_map(char::to_lowercase)
            .collect();
        cleaned.split_whitespace().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    #[serde(default = "Bm25Params::default_k1")]
    pub k1: f64,
    #[serde(default = "Bm25Params::default_b")]
    pub b: f64,
}

impl Bm25Params {
    fn default_k1() -> f64 {
        0.9
    }

    fn default_b() -> f64 {
        0.4
    }

    pub fn new(k1: f64, b: f64) -> Result<Self, IndexError> {
        let p = Self { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(IndexError::InvalidParams(format!("k1 must be >= 0 (got {})", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(IndexError::InvalidParams(format!("b must be in [0, 1] (got {})", self.b)));
        }
        Ok(())
    }
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Ordinal into the id-sorted document table.
    pub doc: u32,
    pub tf: u32,
}

/// Documents are numbered in ascending passage-id order, so postings sorted by
/// ordinal are also sorted by passage id.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    analyzer: String,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avgdl: f64,
    postings: HashMap<String, Vec<Posting>>,
}

impl InvertedIndex {
    pub fn n(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    fn ordinal(&self, passage_id: &str) -> Option<u32> {
        self.doc_ids
            .binary_search_by(|d| d.as_str().cmp(passage_id))
            .ok()
            .map(|i| i as u32)
    }

    pub fn doc_len(&self, passage_id: &str) -> Option<u32> {
        self.ordinal(passage_id).map(|o| self.doc_len[o as usize])
    }

    pub fn tf(&self, term: &str, passage_id: &str) -> u32 {
        let Some(doc) = self.ordinal(passage_id) else {
            return 0;
        };
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc)
            .map_or(0, |i| list[i].tf)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, params: &Bm25Params, idf: f64, tf: u32, len: u32) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - params.b + params.b * len as f64 / self.avgdl;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    /// Writes the versioned JSONL postings dump: a header line, one line per
    /// document (`doc`, `len`) in id order, then one line per term
    /// (`term`, `postings: [[doc_id, tf], ...]`) in term order.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io = |e: std::io::Error| IndexError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "analyzer": self.analyzer,
            "n": self.n(),
            "avgdl": self.avgdl,
        });
        writeln!(w, "{header}")?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_len) {
            writeln!(w, "{}", serde_json::json!({"doc": id, "len": len}))?;
        }
        let sorted: BTreeMap<&String, &Vec<Posting>> = self.postings.iter().collect();
        for (term, list) in sorted {
            let postings: Vec<(&str, u32)> = list.iter().map(|p| (self.doc_id(p.doc), p.tf)).collect();
            writeln!(w, "{}", serde_json::json!({"term": term, "postings": postings}))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let display = path.display().to_string();
        let io = |e: std::io::Error| IndexError::Io {
            path: display.clone(),
            message: e.to_string(),
        };
        let fmt = |line: usize, message: String| IndexError::Format {
            path: display.clone(),
            line,
            message,
        };
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            analyzer: String,
            n: usize,
            avgdl: f64,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Body {
            Doc { doc: String, len: u32 },
            Term { term: String, postings: Vec<(String, u32)> },
        }
        let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
        let header_line = lines.next().ok_or_else(|| fmt(1, "empty index file".into()))?.map_err(io)?;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| fmt(1, e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(fmt(1, format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut doc_ids = Vec::with_capacity(header.n);
        let mut doc_len = Vec::with_capacity(header.n);
        let mut raw_terms = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            match serde_json::from_str::<Body>(&line).map_err(|e| fmt(i + 2, e.to_string()))? {
                Body::Doc { doc, len } => {
                    doc_ids.push(doc);
                    doc_len.push(len);
                }
                Body::Term { term, postings } => raw_terms.push((i + 2, term, postings)),
            }
        }
        if doc_ids.len() != header.n {
            return Err(fmt(1, format!("header says {} docs, found {}", header.n, doc_ids.len())));
        }
        let mut index = InvertedIndex {
            analyzer: header.analyzer,
            doc_ids,
            doc_len,
            avgdl: header.avgdl,
            postings: HashMap::with_capacity(raw_terms.len()),
        };
        for (line, term, list) in raw_terms {
            let mut postings = Vec::with_capacity(list.len());
            for (id, tf) in list {
                let doc = index
                    .ordinal(&id)
                    .ok_or_else(|| fmt(line, format!("unknown doc `{id}`")))?;
                postings.push(Posting { doc, tf });
            }
            index.postings.insert(term, postings);
        }
        Ok(index)
    }
}

/// Builds the index over every passage's contents.
pub fn build_index(store: &PassageStore, analyzer: &dyn Analyzer) -> InvertedIndex {
    let mut docs: Vec<(&str, Vec<String>)> = store
        .iter()
        .map(|p| (p.id.as_str(), analyzer.analyze(&p.contents)))
        .collect();
    docs.sort_by(|a, b| a.0.cmp(b.0));
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut doc_len = Vec::with_capacity(docs.len());
    for (ordinal, (_, tokens)) in docs.iter().enumerate() {
        doc_len.push(tokens.len() as u32);
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        for (term, tf) in counts {
            postings.entry(term.to_string()).or_default().push(Posting {
                doc: ordinal as u32,
                tf,
            });
        }
    }
    let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
    let avgdl = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
    InvertedIndex {
        analyzer: analyzer.name().to_string(),
        doc_ids: docs.into_iter().map(|(id, _)| id.to_string()).collect(),
        doc_len,
        avgdl,
        postings,
    }
}

/// BM25 score of one passage for already-analyzed query terms.
pub fn bm25_score(
    index: &InvertedIndex,
    params: &Bm25Params,
    query_terms: &[String],
    passage_id: &str,
) -> Result<f64, IndexError> {
    let len = index
        .doc_len(passage_id)
        .ok_or_else(|| IndexError::UnknownPassage(passage_id.to_string()))?;
    let mut score = 0.0;
    for term in query_terms {
        let tf = index.tf(term, passage_id);
        if tf > 0 {
            score += index.term_weight(params, index.idf(term), tf, len);
        }
    }
    Ok(score)
}

/// Term-at-a-time top-k search. Passages with zero score are never returned.
pub fn search(
    index: &InvertedIndex,
    params: &Bm25Params,
    analyzer: &dyn Analyzer,
    query: &str,
    k: usize,
) -> Vec<ScoredPassage> {
    let terms = analyzer.analyze(query);
    let mut acc: HashMap<u32, f64> = HashMap::new();
    for term in &terms {
        let list = index.postings(term);
        if list.is_empty() {
            continue;
        }
        let idf = index.idf(term);
        for p in list {
            *acc.entry(p.doc).or_insert(0.0) += index.term_weight(params, idf, p.tf, index.doc_len[p.doc as usize]);
        }
    }
    let mut top = TopK::new(k);
    for (&doc, &score) in &acc {
        if score > 0.0 {
            top.push(doc as usize, index.doc_id(doc), score);
        }
    }
    top.into_ranked().into_iter().map(|(_, h)| h).collect()
}

pub struct Bm25Retriever {
    passages: Arc<PassageStore>,
    index: InvertedIndex,
    params: Bm25Params,
    analyzer: Box<dyn Analyzer>,
}

impl Bm25Retriever {
    pub fn build(passages: Arc<PassageStore>, params: Bm25Params) -> Result<Self, IndexError> {
        params.validate()?;
        let index = build_index(&passages, &SimpleAnalyzer);
        Ok(Self {
            passages,
            index,
            params,
            analyzer: Box::new(SimpleAnalyzer),
        })
    }

    /// Uses a prebuilt index; every indexed id must exist in `passages`.
    pub fn with_index(
        passages: Arc<PassageStore>,
        index: InvertedIndex,
        params: Bm25Params,
    ) -> Result<Self, IndexError> {
        params.validate()?;
        if let Some(id) = index.doc_ids.iter().find(|id| passages.get(id).is_none()) {
            return Err(IndexError::UnknownPassage(id.clone()));
        }
        Ok(Self {
            passages,
            index,
            params,
            analyzer: Box::new(SimpleAnalyzer),
        })
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }
}

impl Retriever for Bm25Retriever {
    fn fingerprint(&self) -> String {
        format!(
            "bm25:k1={}:b={}:{}:{}",
            self.params.k1,
            self.params.b,
            self.analyzer.name(),
            self.passages.fingerprint()
        )
    }

    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
        Ok(search(&self.index, &self.params, self.analyzer.as_ref(), query, top_k))
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }
}
