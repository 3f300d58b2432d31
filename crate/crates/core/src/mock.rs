//! Deterministic stand-ins for model services. They back the bundled mock
//! HTTP server, the toy end-to-end runs, and unit tests.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::corpus::split_sentences;
use crate::dense::{cosine, EmbeddingBackend};
use crate::generate::{
    Capabilities, GenerateError, GenerationOutput, GenerationParams, Generator, Message, Role, TokenLogprob,
};
use crate::pipeline::prompts;
use crate::corpus::Passage;
use crate::retrieval::{rank_hits, Reranker, RetrievalError, RetrievedPassage, Retriever, ScoredPassage};

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Splits text into tokens that each carry their leading whitespace, so the
/// tokens concatenate back to the input.
pub fn mock_tokenize(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if in_word {
                out.push(std::mem::take(&mut cur));
                in_word = false;
            }
            cur.push(c);
        } else {
            in_word = true;
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        match out.last_mut() {
            Some(last) if !in_word => last.push_str(&cur),
            _ => out.push(cur),
        }
    }
    out
}

/// Feature-hashed bag of words, L2-normalized. Equal texts embed equally.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashEmbedder {
    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for w in words(text) {
            let h = fnv1a(w.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn describe(&self) -> String {
        format!("hash{}", self.dim)
    }

    fn embed_batch(&self, _model: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        Ok(inputs.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Cross-encoder stand-in: cosine of hashed bags of words.
pub fn mock_rerank_scores(query: &str, documents: &[String]) -> Vec<f64> {
    let e = HashEmbedder::default();
    let q = e.embed_text(query);
    documents.iter().map(|d| cosine(&q, &e.embed_text(d))).collect()
}

/// In-process reranker backed by [`mock_rerank_scores`].
#[derive(Debug, Default)]
pub struct MockCrossEncoder;

impl Reranker for MockCrossEncoder {
    fn name(&self) -> String {
        "cross_encoder:mock".into()
    }

    fn score(&self, query: &str, candidates: &[RetrievedPassage]) -> Result<Vec<f64>, RetrievalError> {
        let docs: Vec<String> = candidates.iter().map(|c| c.contents.clone()).collect();
        Ok(mock_rerank_scores(query, &docs))
    }
}

const STOP_WORDS: &[&str] = &[
    "the", "and", "what", "who", "whom", "which", "where", "when", "how", "was", "were", "are", "for", "did", "does",
    "with", "from", "that", "this", "its",
];

fn content_words(text: &str) -> HashSet<String> {
    words(text)
        .into_iter()
        .filter(|w| w.chars().count() >= 3 && !STOP_WORDS.contains(&w.as_str()))
        .collect()
}

/// Sentence of `context` sharing the most content words with `question`.
/// Ties go to the earliest sentence; no overlap gives `None`.
pub fn best_sentence(question: &str, context: &str) -> Option<String> {
    let q = content_words(question);
    let mut best: Option<(usize, String)> = None;
    for line in context.lines() {
        let body = strip_doc_prefix(line);
        for s in split_sentences(body) {
            let n = content_words(&s).intersection(&q).count();
            if n > 0 && best.as_ref().is_none_or(|(m, _)| n > *m) {
                best = Some((n, s));
            }
        }
    }
    best.map(|(_, s)| s)
}

fn strip_doc_prefix(line: &str) -> &str {
    if line.starts_with("Doc ") {
        if let Some(i) = line.find(") ") {
            return &line[i + 2..];
        }
    }
    line
}

/// Last word of the best matching sentence, or "unknown".
pub fn mock_answer(question: &str, context: &str) -> String {
    best_sentence(question, context)
        .and_then(|s| {
            s.split_whitespace()
                .last()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        })
        .filter(|w| !w.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Rule-based generator. It answers from the passages in the system message,
/// plays its part in the multi-step prompts, and scores continuations by
/// whether their words occur in the context.
#[derive(Debug, Default)]
pub struct MockGenerator {
    calls: AtomicUsize,
}

impl MockGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Deterministic probability in [0.3, 1.0) for a token.
    pub fn token_prob(token: &str) -> f64 {
        let h = fnv1a(token.trim().to_lowercase().as_bytes());
        0.3 + 0.7 * ((h % 1000) as f64 / 1000.0)
    }

    /// Raw reply before stop and length handling.
    pub fn respond(messages: &[Message]) -> String {
        let last_user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if last_user.contains(prompts::SELF_ASK_OPENER) {
            return self_ask_step(last_user);
        }
        if last_user.contains(prompts::SURE_RANK_MARKER) {
            return "1".into();
        }
        if let Some(i) = last_user.find(prompts::SURE_CANDIDATE_MARKER) {
            let cand = last_user[i + prompts::SURE_CANDIDATE_MARKER.len()..]
                .lines()
                .next()
                .unwrap_or("")
                .trim();
            return format!("The passages support {cand}.");
        }
        if last_user.contains(prompts::ABSTRACTIVE_MARKER) {
            let question = last_user
                .lines()
                .find_map(|l| l.strip_prefix("Question: "))
                .unwrap_or("");
            return best_sentence(question, last_user).unwrap_or_default();
        }

        let question = last_user.strip_prefix("Question: ").unwrap_or(last_user);
        let context = messages
            .iter()
            .find(|m| m.role == Role::System)
            .and_then(|m| m.content.split_once('\n'))
            .map(|(_, rest)| rest)
            .unwrap_or("");
        let answer = mock_answer(question, context);
        match messages.last() {
            Some(m) if m.role == Role::Assistant => {
                let prefix = m.content.trim();
                match answer.strip_prefix(prefix) {
                    Some(rest) if !prefix.is_empty() => rest.to_string(),
                    _ => String::new(),
                }
            }
            _ => answer,
        }
    }
}

fn self_ask_step(prompt: &str) -> String {
    let block = prompt
        .rfind("Question: ")
        .map(|i| &prompt[i + "Question: ".len()..])
        .unwrap_or(prompt);
    let question = block.lines().next().unwrap_or("");
    let last_intermediate = block
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(prompts::SELF_ASK_INTERMEDIATE));
    match last_intermediate {
        None => format!(" Yes.\n{} {question}\n", prompts::SELF_ASK_FOLLOW_UP),
        Some(ans) => format!("{} {}", prompts::SELF_ASK_FINAL, ans.trim()),
    }
}

/// Cuts at stop sequences and the token budget, then attaches logprobs.
fn shape_output(raw: &str, params: &GenerationParams, prob: impl Fn(usize, &str) -> f64) -> GenerationOutput {
    let mut text = raw.to_string();
    let mut finish = "stop";
    if let Some(cut) = params
        .stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
    {
        text.truncate(cut);
    }
    let mut tokens = mock_tokenize(&text);
    if tokens.len() > params.max_new_tokens {
        tokens.truncate(params.max_new_tokens);
        text = tokens.concat();
        finish = "length";
    }
    let token_logprobs = params.logprobs.then(|| {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| TokenLogprob {
                token: t.clone(),
                logprob: prob(i, t).ln(),
            })
            .collect()
    });
    GenerationOutput {
        text,
        token_count: tokens.len(),
        token_logprobs,
        finish_reason: Some(finish.into()),
    }
}

impl Generator for MockGenerator {
    fn name(&self) -> String {
        "mock".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_logprobs: true,
            supports_scoring: true,
        }
    }

    fn complete(&self, messages: &[Message], params: &GenerationParams) -> Result<GenerationOutput, GenerateError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let raw = Self::respond(messages);
        Ok(shape_output(&raw, params, |_, t| Self::token_prob(t)))
    }

    fn score_tokens(&self, context: &[Message], continuation: &str) -> Result<Vec<TokenLogprob>, GenerateError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let ctx: HashSet<String> = context.iter().flat_map(|m| words(&m.content)).collect();
        Ok(mock_tokenize(continuation)
            .into_iter()
            .map(|token| {
                let seen = words(&token).iter().all(|w| ctx.contains(w));
                let logprob = if seen { 0.9f64.ln() } else { 0.1f64.ln() };
                TokenLogprob { token, logprob }
            })
            .collect())
    }
}

/// Retriever returning the same scored passages for every query. It
/// records the queries it receives.
pub struct StaticRetriever {
    passages: Vec<Passage>,
    scores: Vec<f64>,
    queries: Mutex<Vec<String>>,
}

impl StaticRetriever {
    pub fn new(scored: Vec<(Passage, f64)>) -> Self {
        let (passages, scores) = scored.into_iter().unzip();
        Self {
            passages,
            scores,
            queries: Mutex::new(Vec::new()),
        }
    }

    pub fn queries(&self) -> Vec<String> {
        self.queries.lock().unwrap().clone()
    }
}

impl Retriever for StaticRetriever {
    fn fingerprint(&self) -> String {
        format!("static:{}", self.passages.len())
    }

    fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredPassage>, RetrievalError> {
        self.queries.lock().unwrap().push(query.to_string());
        let scored = self.passages.iter().map(|p| p.id.clone()).zip(self.scores.iter().copied()).collect();
        Ok(rank_hits(scored, top_k))
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedReply {
    pub text: String,
    /// One probability per token of `text`; defaults to 0.9 each.
    pub token_probs: Option<Vec<f64>>,
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_probs: None,
        }
    }

    pub fn with_probs(text: impl Into<String>, probs: Vec<f64>) -> Self {
        Self {
            text: text.into(),
            token_probs: Some(probs),
        }
    }
}

type RespondFn = dyn Fn(&[Message], &GenerationParams) -> ScriptedReply + Send + Sync;
type ScoreFn = dyn Fn(&[Message], &str) -> Vec<TokenLogprob> + Send + Sync;

/// Generator driven by closures. Records every prompt it receives.
pub struct ScriptedGenerator {
    respond: Box<RespondFn>,
    scorer: Option<Box<ScoreFn>>,
    calls: Mutex<Vec<Vec<Message>>>,
    score_calls: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new(f: impl Fn(&[Message], &GenerationParams) -> ScriptedReply + Send + Sync + 'static) -> Self {
        Self {
            respond: Box::new(f),
            scorer: None,
            calls: Mutex::new(Vec::new()),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(text: &str) -> Self {
        let text = text.to_string();
        Self::new(move |_, _| ScriptedReply::text(text.clone()))
    }

    pub fn with_scorer(mut self, f: impl Fn(&[Message], &str) -> Vec<TokenLogprob> + Send + Sync + 'static) -> Self {
        self.scorer = Some(Box::new(f));
        self
    }

    pub fn calls(&self) -> Vec<Vec<Message>> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn score_call_count(&self) -> usize {
        self.score_calls.load(Ordering::Relaxed)
    }
}

impl Generator for ScriptedGenerator {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_logprobs: true,
            supports_scoring: self.scorer.is_some(),
        }
    }

    fn complete(&self, messages: &[Message], params: &GenerationParams) -> Result<GenerationOutput, GenerateError> {
        self.calls.lock().unwrap().push(messages.to_vec());
        let reply = (self.respond)(messages, params);
        let probs = reply.token_probs.clone();
        Ok(shape_output(&reply.text, params, |i, _| {
            probs.as_ref().and_then(|p| p.get(i).copied()).unwrap_or(0.9)
        }))
    }

    fn score_tokens(&self, context: &[Message], continuation: &str) -> Result<Vec<TokenLogprob>, GenerateError> {
        let scorer = self
            .scorer
            .as_ref()
            .ok_or(GenerateError::Unsupported("sequence scoring"))?;
        self.score_calls.fetch_add(1, Ordering::Relaxed);
        Ok(scorer(context, continuation))
    }
}
