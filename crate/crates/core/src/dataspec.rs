//! Unified dataset schema: one JSON object per line with `id`, `question`,
//! `golden_answers`, optional `choices` and free-form `metadata`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing or invalid field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate item id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: golden answer `{answer}` is not a valid index into {choices} choices")]
    BadChoiceIndex {
        line: usize,
        answer: String,
        choices: usize,
    },
    #[error("unknown split `{0}` (expected train, dev or test)")]
    UnknownSplit(String),
    #[error("requested {requested} items but the dataset has {available}")]
    NotEnoughItems { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

/// One evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

impl Item {
    pub fn new(id: impl Into<String>, question: impl Into<String>, golden: Vec<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            golden_answers: golden,
            choices: None,
            metadata: Map::new(),
        }
    }

    /// For multiple-choice items, golden answers resolved to option text.
    pub fn golden_choice_texts(&self) -> Option<Vec<&str>> {
        let choices = self.choices.as_ref()?;
        Some(
            self.golden_answers
                .iter()
                .filter_map(|g| g.parse::<usize>().ok())
                .filter_map(|i| choices.get(i).map(String::as_str))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub items: Vec<Item>,
}

const KNOWN_FIELDS: [&str; 5] = ["id", "question", "golden_answers", "choices", "metadata"];

fn parse_item(line: usize, text: &str) -> Result<Item, DatasetError> {
    let mut obj: Map<String, Value> = serde_json::from_str(text).map_err(|e| DatasetError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let id = match obj.remove("id") {
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(DatasetError::MissingField { line, field: "id" }),
    };
    let question = match obj.remove("question") {
        Some(Value::String(s)) => s,
        _ => return Err(DatasetError::MissingField { line, field: "question" }),
    };
    let golden_answers = match obj.remove("golden_answers") {
        Some(Value::Array(values)) if !values.is_empty() => values
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Some(s),
                Value::Number(n) => Some(n.to_string()),
                Value::Bool(b) => Some(b.to_string()),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .ok_or(DatasetError::MissingField {
                line,
                field: "golden_answers",
            })?,
        _ => {
            return Err(DatasetError::MissingField {
                line,
                field: "golden_answers",
            })
        }
    };
    let choices = match obj.remove("choices") {
        None | Some(Value::Null) => None,
        Some(Value::Array(values)) => Some(
            values
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Some(s),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>()
                .ok_or(DatasetError::MissingField { line, field: "choices" })?,
        ),
        Some(_) => return Err(DatasetError::MissingField { line, field: "choices" }),
    };
    let mut metadata = match obj.remove("metadata") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(DatasetError::MissingField { line, field: "metadata" }),
    };
    for (k, v) in obj {
        debug_assert!(!KNOWN_FIELDS.contains(&k.as_str()));
        metadata.entry(k).or_insert(v);
    }
    if let Some(choices) = &choices {
        for answer in &golden_answers {
            let ok = answer.parse::<usize>().is_ok_and(|i| i < choices.len());
            if !ok {
                return Err(DatasetError::BadChoiceIndex {
                    line,
                    answer: answer.clone(),
                    choices: choices.len(),
                });
            }
        }
    }
    Ok(Item {
        id,
        question,
        golden_answers,
        choices,
        metadata,
    })
}

/// Reads a JSONL split file. Unknown top-level fields are folded into `metadata`.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(io_err)?;
        if text.trim().is_empty() {
            continue;
        }
        let item = parse_item(line_no, &text)?;
        if !seen.insert(item.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: item.id,
            });
        }
        items.push(item);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset { name, split, items })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in &ds.items {
        let line = serde_json::to_string(item).expect("items serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectMode {
    Sequential,
    Random { seed: u64 },
}

/// Picks `n` items; random selection keeps the original relative order.
pub fn select(ds: &Dataset, mode: SelectMode, n: usize) -> Result<Dataset, DatasetError> {
    if n > ds.items.len() {
        return Err(DatasetError::NotEnoughItems {
            requested: n,
            available: ds.items.len(),
        });
    }
    let items = match mode {
        SelectMode::Sequential => ds.items[..n].to_vec(),
        SelectMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, ds.items.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| ds.items[i].clone()).collect()
        }
    };
    Ok(Dataset {
        name: ds.name.clone(),
        split: ds.split,
        items,
    })
}

/// Keeps items whose metadata has `key` and whose value satisfies `predicate`.
pub fn filter_by_metadata<F>(ds: &Dataset, key: &str, predicate: F) -> Dataset
where
    F: Fn(&Value) -> bool,
{
    Dataset {
        name: ds.name.clone(),
        split: ds.split,
        items: ds
            .items
            .iter()
            .filter(|item| item.metadata.get(key).is_some_and(&predicate))
            .cloned()
            .collect(),
    }
}
