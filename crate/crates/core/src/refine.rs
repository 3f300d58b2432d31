//! Post-retrieval context refiners.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::split_sentences;
use crate::dense::{cosine, EmbedRole, EmbeddingClient};
use crate::generate::{generate, GenerateError, GenerationParams, Generator, Message, PromptTemplate};
use crate::pipeline::prompts::ABSTRACTIVE_TEMPLATE;
use crate::retrieval::{RetrievalError, RetrievedPassage};

pub const PERPLEXITY_DEFAULT_RATE: f64 = 0.5;
pub const BUDGET_DEFAULT_RATE: f64 = 0.55;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("compression rate must be in (0, 1], got {0}")]
    InvalidRate(f64),
    #[error("scorer failed: {0}")]
    Scorer(#[from] GenerateError),
    #[error("embedding failed: {0}")]
    Embedding(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    Extractive,
    Perplexity,
    Abstractive,
}

impl RefinerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefinerKind::Extractive => "extractive",
            RefinerKind::Perplexity => "perplexity",
            RefinerKind::Abstractive => "abstractive",
        }
    }

    pub fn default_rate(&self) -> f64 {
        match self {
            RefinerKind::Perplexity => PERPLEXITY_DEFAULT_RATE,
            _ => BUDGET_DEFAULT_RATE,
        }
    }
}

pub fn validate_rate(rate: f64) -> Result<(), RefineError> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(RefineError::InvalidRate(rate))
    }
}

/// Output of a refiner, with word counts before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub text: String,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// The refiners see only passage text, never the surrounding prompt.
pub fn passage_text(passages: &[RetrievedPassage]) -> String {
    passages
        .iter()
        .map(|p| p.contents.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Keeps the sentences most similar to the query, greedily, until the next
/// one would exceed `budget` words. Output keeps document order.
pub fn extractive_refine(
    query: &str,
    passages: &[RetrievedPassage],
    embedder: &EmbeddingClient,
    budget: usize,
) -> Result<String, RefineError> {
    let sentences: Vec<String> = passages.iter().flat_map(|p| split_sentences(&p.contents)).collect();
    if sentences.is_empty() {
        return Ok(String::new());
    }
    let q = embedder.embed_one(query, EmbedRole::Query)?;
    let vs = embedder.embed(&sentences, EmbedRole::Passage)?;
    let scores: Vec<f64> = vs.iter().map(|v| cosine(&q, v)).collect();
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; sentences.len()];
    let mut used = 0;
    for i in order {
        let w = word_count(&sentences[i]);
        if used + w > budget {
            break;
        }
        used += w;
        keep[i] = true;
    }
    if used == 0 {
        log::warn!("extractive refiner: budget of {budget} words fits no sentence");
    }
    Ok(sentences
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect::<Vec<_>>()
        .join(" "))
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits a whitespace word into its lexical unit and trailing terminal
/// punctuation. The punctuation survives deletion of the unit.
fn split_word(word: &str) -> (&str, &str) {
    let core = word.trim_end_matches(is_terminal);
    (core, &word[core.len()..])
}

/// Lexical units of `text`: whitespace words without trailing terminal
/// punctuation. Pure punctuation is not a unit.
pub fn lexical_units(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| split_word(w).0)
        .filter(|u| !u.is_empty())
        .collect()
}

/// Byte ranges of whitespace-separated words.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Self-information of each word: the max of `-logprob` over the tokens that
/// overlap it. Token offsets are the running sum of token lengths.
pub fn word_self_information(text: &str, tokens: &[crate::generate::TokenLogprob]) -> Vec<f64> {
    let spans = word_spans(text);
    let mut info = vec![0.0f64; spans.len()];
    let mut offset = 0;
    let mut w = 0;
    for t in tokens {
        let (ts, te) = (offset, offset + t.token.len());
        offset = te;
        while w < spans.len() && spans[w].1 <= ts {
            w += 1;
        }
        let mut j = w;
        while j < spans.len() && spans[j].0 < te {
            info[j] = info[j].max(-t.logprob);
            j += 1;
        }
    }
    info
}

/// Deletes the least informative units until `ceil(rate * n)` remain. Equal
/// information keeps the earlier unit.
pub fn perplexity_refine(text: &str, scorer: &dyn Generator, rate: f64) -> Result<String, RefineError> {
    validate_rate(rate)?;
    if rate >= 1.0 || text.trim().is_empty() {
        return Ok(text.to_string());
    }
    let tokens = scorer.score_tokens(&[], text)?;
    let info = word_self_information(text, &tokens);
    Ok(compress_words(text, &info, rate))
}

/// Selection step of [`perplexity_refine`], given per-word information.
pub fn compress_words(text: &str, info: &[f64], rate: f64) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let units: Vec<usize> = (0..words.len())
        .filter(|&i| !split_word(words[i]).0.is_empty())
        .collect();
    let target = (rate * units.len() as f64).ceil() as usize;
    let mut ranked = units.clone();
    ranked.sort_by(|&a, &b| info[b].total_cmp(&info[a]).then(a.cmp(&b)));
    let mut keep = vec![false; words.len()];
    for &i in ranked.iter().take(target) {
        keep[i] = true;
    }
    let mut out: Vec<&str> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let (core, punct) = split_word(w);
        if keep[i] || core.is_empty() {
            out.push(w);
        } else if !punct.is_empty() {
            out.push(punct);
        }
    }
    out.join(" ")
}

/// Asks the summarizer for a condensed context. Empty input skips the call.
pub fn abstractive_refine(
    query: &str,
    passages: &[RetrievedPassage],
    summarizer: &dyn Generator,
    template: &str,
    max_tokens: usize,
) -> Result<String, RefineError> {
    if passages.is_empty() {
        return Ok(String::new());
    }
    let listing = PromptTemplate::default().format_passages(passages);
    let prompt = template.replace("{question}", query).replace("{passages}", &listing);
    let params = GenerationParams {
        max_new_tokens: max_tokens,
        ..Default::default()
    };
    let out = generate(summarizer, &[Message::user(prompt)], &params)?;
    Ok(out.text.trim().to_string())
}

/// A configured refiner with its client.
pub enum Refiner {
    Extractive {
        embedder: Arc<EmbeddingClient>,
        token_budget: Option<usize>,
        rate: f64,
    },
    Perplexity {
        scorer: Arc<dyn Generator>,
        rate: f64,
    },
    Abstractive {
        summarizer: Arc<dyn Generator>,
        template: String,
        max_tokens: Option<usize>,
        rate: f64,
    },
}

impl Refiner {
    pub fn extractive(embedder: Arc<EmbeddingClient>, token_budget: Option<usize>, rate: f64) -> Self {
        Refiner::Extractive {
            embedder,
            token_budget,
            rate,
        }
    }

    pub fn perplexity(scorer: Arc<dyn Generator>, rate: f64) -> Self {
        Refiner::Perplexity { scorer, rate }
    }

    pub fn abstractive(summarizer: Arc<dyn Generator>, max_tokens: Option<usize>, rate: f64) -> Self {
        Refiner::Abstractive {
            summarizer,
            template: ABSTRACTIVE_TEMPLATE.to_string(),
            max_tokens,
            rate,
        }
    }

    pub fn kind(&self) -> RefinerKind {
        match self {
            Refiner::Extractive { .. } => RefinerKind::Extractive,
            Refiner::Perplexity { .. } => RefinerKind::Perplexity,
            Refiner::Abstractive { .. } => RefinerKind::Abstractive,
        }
    }

    fn rate(&self) -> f64 {
        match self {
            Refiner::Extractive { rate, .. } | Refiner::Perplexity { rate, .. } | Refiner::Abstractive { rate, .. } => {
                *rate
            }
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        validate_rate(self.rate())
    }

    pub fn refine(&self, query: &str, passages: &[RetrievedPassage]) -> Result<Refined, RefineError> {
        self.validate()?;
        let raw = passage_text(passages);
        let before = word_count(&raw);
        let budget = |rate: f64| (rate * before as f64).ceil() as usize;
        let text = match self {
            Refiner::Extractive {
                embedder,
                token_budget,
                rate,
            } => extractive_refine(query, passages, embedder, token_budget.unwrap_or_else(|| budget(*rate)))?,
            Refiner::Perplexity { scorer, rate } => perplexity_refine(&raw, scorer.as_ref(), *rate)?,
            Refiner::Abstractive {
                summarizer,
                template,
                max_tokens,
                rate,
            } => abstractive_refine(
                query,
                passages,
                summarizer.as_ref(),
                template,
                max_tokens.unwrap_or_else(|| budget(*rate).max(1)),
            )?,
        };
        Ok(Refined {
            tokens_after: word_count(&text),
            tokens_before: before,
            text,
        })
    }
}
