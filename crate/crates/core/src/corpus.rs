//! Passage corpus model, rule-based sentence splitting and sliding-window
//! chunking of plain-text documents.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate passage id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: duplicate document id `{id}`")]
    DuplicateDocument { line: usize, id: String },
    #[error("line {line}: document `{id}` has empty text")]
    EmptyDocument { line: usize, id: String },
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
}

/// A pre-extracted plain-text source document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(alias = "contents")]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ChunkUnit {
    Sentences,
    Words,
}

impl std::str::FromStr for ChunkUnit {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentences" | "sentence" => Ok(ChunkUnit::Sentences),
            "words" | "word" => Ok(ChunkUnit::Words),
            other => Err(CorpusError::InvalidPolicy(format!("unknown unit `{other}`"))),
        }
    }
}

/// Sliding-window parameters. `stride < size` produces overlapping passages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ChunkPolicy {
    pub unit: ChunkUnit,
    pub size: usize,
    pub stride: usize,
}

impl ChunkPolicy {
    pub fn new(unit: ChunkUnit, size: usize, stride: usize) -> Result<Self, CorpusError> {
        let policy = Self { unit, size, stride };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.size == 0 {
            return Err(CorpusError::InvalidPolicy("size must be >= 1".into()));
        }
        if self.stride == 0 || self.stride > self.size {
            return Err(CorpusError::InvalidPolicy(format!(
                "stride must be in 1..={} (got {})",
                self.size, self.stride
            )));
        }
        Ok(())
    }
}

/// One retrievable unit. Only `id`, `title` and `contents` are persisted;
/// provenance is recoverable from the `<doc_id>_<window>` id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub contents: String,
    #[serde(skip)]
    pub span: Option<(usize, usize)>,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, contents: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            contents: contents.into(),
            span: None,
        }
    }

    pub fn word_count(&self) -> usize {
        self.contents.split_whitespace().count()
    }
}

/// Tokens that end in a period without ending a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sr.", "Jr.", "St.", "Mt.", "Gen.", "Gov.", "Sen.",
    "Rep.", "Col.", "Lt.", "Capt.", "Sgt.", "Rev.", "Hon.", "vs.", "e.g.", "i.e.", "cf.", "al.",
    "approx.", "No.", "Inc.", "Ltd.", "Co.", "Corp.", "U.S.", "U.K.", "U.N.", "E.U.", "Jan.",
    "Feb.", "Mar.", "Apr.", "Jun.", "Jul.", "Aug.", "Sep.", "Sept.", "Oct.", "Nov.", "Dec.",
];

fn is_abbreviation(token: &str) -> bool {
    let token = token.trim_start_matches(['(', '"', '\'', '[']);
    ABBREVIATIONS.iter().any(|a| a.eq_ignore_ascii_case(token))
}

/// Byte ranges of each sentence in `text`, trimmed of surrounding whitespace.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = text[i..].chars().next().unwrap();
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(i);
            }
            i += c.len_utf8();
            continue;
        }
        if matches!(c, '.' | '!' | '?') {
            let mut end = i;
            for ch in text[i..].chars() {
                if matches!(ch, '.' | '!' | '?' | '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                    end += ch.len_utf8();
                } else {
                    break;
                }
            }
            let at_break = text[end..].chars().next().is_none_or(char::is_whitespace);
            if at_break {
                let s = start.unwrap();
                let token_start = text[s..end]
                    .rfind(char::is_whitespace)
                    .map(|p| s + p + 1)
                    .unwrap_or(s);
                let token = &text[token_start..end];
                if !(c == '.' && is_abbreviation(token)) {
                    spans.push((s, end));
                    start = None;
                }
            }
            i = end;
            continue;
        }
        i += c.len_utf8();
    }
    if let Some(s) = start {
        let e = text.trim_end().len();
        if e > s {
            spans.push((s, e));
        }
    }
    spans
}

/// Split on `.`, `!`, `?` followed by whitespace, except after a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    sentence_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_string())
        .collect()
}

/// Start/end unit indices of every window over `units` units.
pub fn window_spans(units: usize, policy: &ChunkPolicy) -> Vec<(usize, usize)> {
    if units == 0 {
        return Vec::new();
    }
    if units <= policy.size {
        return vec![(0, units)];
    }
    let mut spans = Vec::new();
    let mut start = 0;
    while start + policy.size <= units {
        spans.push((start, start + policy.size));
        start += policy.stride;
    }
    let covered = spans.last().map(|&(_, e)| e).unwrap_or(0);
    if covered < units {
        spans.push((start, units));
    }
    spans
}

pub fn chunk_document(doc: &Document, policy: &ChunkPolicy) -> Vec<Passage> {
    let units: Vec<String> = match policy.unit {
        ChunkUnit::Sentences => split_sentences(&doc.text),
        ChunkUnit::Words => doc.text.split_whitespace().map(str::to_string).collect(),
    };
    window_spans(units.len(), policy)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (s, e))| Passage {
            id: format!("{}_{}", doc.id, ordinal),
            title: doc.title.clone(),
            contents: units[s..e].join(" "),
            span: Some((s, e)),
        })
        .collect()
}

/// Chunks documents in parallel; output is in document order, then window order.
pub fn chunk_documents(docs: &[Document], policy: &ChunkPolicy) -> Vec<Passage> {
    docs.par_iter()
        .map(|d| chunk_document(d, policy))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn jsonl_lines(
    path: &Path,
) -> Result<impl Iterator<Item = Result<(usize, String), CorpusError>>, CorpusError> {
    let display = path.display().to_string();
    Ok(open(path)?
        .lines()
        .enumerate()
        .map(move |(i, line)| {
            line.map(|l| (i + 1, l)).map_err(|source| CorpusError::Io {
                path: display.clone(),
                source,
            })
        })
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut seen = HashMap::new();
    let mut docs = Vec::new();
    for entry in jsonl_lines(path)? {
        let (line, text) = entry?;
        let doc: Document = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyDocument { line, id: doc.id });
        }
        if seen.insert(doc.id.clone(), line).is_some() {
            return Err(CorpusError::DuplicateDocument { line, id: doc.id });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Immutable passage collection with O(1) lookup by id.
#[derive(Debug, Clone, Default)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    digest: String,
}

fn digest_passages(passages: &[Passage]) -> String {
    let mut h = Sha256::new();
    for p in passages {
        for field in [&p.id, &p.title, &p.contents] {
            h.update(field.as_bytes());
            h.update([0u8]);
        }
    }
    hex::encode(&h.finalize()[..8])
}

impl PassageStore {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: p.id.clone(),
                });
            }
        }
        let digest = digest_passages(&passages);
        Ok(Self {
            passages,
            by_id,
            digest,
        })
    }

    /// Content digest over ids, titles and contents.
    pub fn fingerprint(&self) -> &str {
        &self.digest
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }
}

/// Streams a `{id, title, contents}` JSONL corpus into a [`PassageStore`].
pub fn load_corpus(path: &Path) -> Result<PassageStore, CorpusError> {
    let mut passages = Vec::new();
    let mut by_id = HashMap::new();
    for entry in jsonl_lines(path)? {
        let (line, text) = entry?;
        let p: Passage = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if by_id.insert(p.id.clone(), passages.len()).is_some() {
            return Err(CorpusError::DuplicateId { line, id: p.id });
        }
        passages.push(p);
    }
    log::debug!("loaded {} passages from {}", passages.len(), path.display());
    let digest = digest_passages(&passages);
    Ok(PassageStore {
        passages,
        by_id,
        digest,
    })
}

pub fn write_corpus(path: &Path, passages: &[Passage]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for p in passages {
        let line = serde_json::json!({"id": p.id, "title": p.title, "contents": p.contents});
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub passage_count: usize,
    pub average_words: f64,
    /// False for an empty store, where the average is reported as 0.
    pub average_defined: bool,
}

pub fn corpus_stats(store: &PassageStore) -> CorpusStats {
    if store.is_empty() {
        return CorpusStats {
            passage_count: 0,
            average_words: 0.0,
            average_defined: false,
        };
    }
    let total: usize = store.iter().map(Passage::word_count).sum();
    CorpusStats {
        passage_count: store.len(),
        average_words: total as f64 / store.len() as f64,
        average_defined: true,
    }
}
