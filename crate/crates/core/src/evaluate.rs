//! Generation and retrieval metrics, token accounting, and the report.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::generate::estimate_tokens;
use crate::pipeline::{PipelineTrace, Step};
use crate::retrieval::RetrievedPassage;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, split on
/// whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Lowercased whitespace tokens, the unit for BLEU and ROUGE-L.
pub fn surface_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn best_over<F: Fn(&str) -> f64>(golds: &[String], f: F) -> f64 {
    golds.iter().map(|g| f(g)).fold(0.0, f64::max)
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let cb = counts(b);
    counts(a)
        .iter()
        .map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0)))
        .sum()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Token-level F1 against the best gold. Two empty sides count as a match.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    best_over(golds, |g| {
        let g = normalize_answer(g);
        if p.is_empty() && g.is_empty() {
            return 1.0;
        }
        if p.is_empty() || g.is_empty() {
            return 0.0;
        }
        let o = overlap(&p, &g);
        if o == 0 {
            return 0.0;
        }
        harmonic(o as f64 / p.len() as f64, o as f64 / g.len() as f64)
    })
}

/// True when `needle` occurs contiguously in `hay`. An empty needle matches
/// only an empty haystack.
fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return hay.is_empty();
    }
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Cover match: some normalized gold occurs contiguously in the prediction.
pub fn accuracy(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| contains_seq(&p, &normalize_answer(g))) {
        1.0
    } else {
        0.0
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn bleu_single(pred: &[String], gold: &[String]) -> f64 {
    let c = pred.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let total = c.saturating_sub(n - 1);
        let refs = ngrams(gold, n);
        let matched: usize = ngrams(pred, n)
            .iter()
            .map(|(g, k)| (*k).min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let r = gold.len();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

/// Sentence-level BLEU-4 with add-one smoothing of zero n-gram matches.
pub fn bleu(pred: &str, golds: &[String]) -> f64 {
    let p = surface_tokens(pred);
    best_over(golds, |g| bleu_single(&p, &surface_tokens(g)))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over surface tokens.
pub fn rouge_l(pred: &str, golds: &[String]) -> f64 {
    let p = surface_tokens(pred);
    best_over(golds, |g| {
        let g = surface_tokens(g);
        if p.is_empty() && g.is_empty() {
            return 1.0;
        }
        let l = lcs_len(&p, &g);
        if l == 0 {
            return 0.0;
        }
        harmonic(l as f64 / p.len() as f64, l as f64 / g.len() as f64)
    })
}

/// How recall@k is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// 1 when any top-k passage contains a gold answer.
    #[default]
    AnswerPresence,
    /// Fraction of gold answers found in some top-k passage.
    GoldCoverage,
}

/// A passage is relevant when a non-empty normalized gold occurs in its
/// normalized contents.
pub fn passage_relevant(contents: &str, golds: &[String]) -> bool {
    let c = normalize_answer(contents);
    golds.iter().any(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && contains_seq(&c, &g)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub average_precision: f64,
}

/// Retrieval metrics from per-rank relevance labels, cut at `k`.
pub fn retrieval_scores_from_labels(relevant: &[bool], k: usize) -> RetrievalScores {
    let top = &relevant[..relevant.len().min(k)];
    let hits = top.iter().filter(|r| **r).count();
    let recall = if hits > 0 { 1.0 } else { 0.0 };
    let precision = if top.is_empty() { 0.0 } else { hits as f64 / top.len() as f64 };
    let mut seen = 0;
    let mut ap = 0.0;
    for (i, r) in top.iter().enumerate() {
        if *r {
            seen += 1;
            ap += seen as f64 / (i + 1) as f64;
        }
    }
    RetrievalScores {
        recall,
        precision,
        f1: harmonic(recall, precision),
        average_precision: if hits > 0 { ap / hits as f64 } else { 0.0 },
    }
}

pub fn retrieval_metrics(
    passages: &[RetrievedPassage],
    golds: &[String],
    k: usize,
    mode: RecallMode,
) -> RetrievalScores {
    let top = &passages[..passages.len().min(k)];
    let labels: Vec<bool> = top.iter().map(|p| passage_relevant(&p.contents, golds)).collect();
    let mut s = retrieval_scores_from_labels(&labels, k);
    if mode == RecallMode::GoldCoverage {
        let found = golds
            .iter()
            .filter(|g| top.iter().any(|p| passage_relevant(&p.contents, std::slice::from_ref(*g))))
            .count();
        s.recall = if golds.is_empty() { 0.0 } else { found as f64 / golds.len() as f64 };
        s.f1 = harmonic(s.recall, s.precision);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Em,
    F1,
    Acc,
    Bleu,
    RougeL,
    Recall,
    Precision,
    RetrievalF1,
    Map,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Em,
        Metric::F1,
        Metric::Acc,
        Metric::Bleu,
        Metric::RougeL,
        Metric::Recall,
        Metric::Precision,
        Metric::RetrievalF1,
        Metric::Map,
    ];

    /// Column name in reports.
    pub fn key(&self) -> &'static str {
        match self {
            Metric::Em => "em",
            Metric::F1 => "f1",
            Metric::Acc => "acc",
            Metric::Bleu => "bleu",
            Metric::RougeL => "rouge_l",
            Metric::Recall => "recall@k",
            Metric::Precision => "precision@k",
            Metric::RetrievalF1 => "f1@k",
            Metric::Map => "map",
        }
    }

    fn is_retrieval(&self) -> bool {
        matches!(self, Metric::Recall | Metric::Precision | Metric::RetrievalF1 | Metric::Map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsageCounts {
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_before: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_after: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_delta: Option<usize>,
}

impl UsageCounts {
    fn add(&mut self, other: &UsageCounts) {
        self.prompt_tokens += other.prompt_tokens;
        self.generated_tokens += other.generated_tokens;
        let sum = |a: Option<usize>, b: Option<usize>| match (a, b) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0) + b.unwrap_or(0)),
        };
        self.refine_before = sum(self.refine_before, other.refine_before);
        self.refine_after = sum(self.refine_after, other.refine_after);
        self.refine_delta = sum(self.refine_delta, other.refine_delta);
    }
}

/// Token counts of one trace. Prompt tokens are whitespace estimates.
pub fn trace_usage(trace: &PipelineTrace) -> UsageCounts {
    let mut u = UsageCounts::default();
    for step in trace.flat_steps() {
        match step {
            Step::Prompt { messages, .. } => u.prompt_tokens += estimate_tokens(messages),
            Step::Generate { output, .. } => u.generated_tokens += output.token_count,
            Step::Refine {
                tokens_before,
                tokens_after,
                ..
            } => {
                u.refine_before = Some(u.refine_before.unwrap_or(0) + tokens_before);
                u.refine_after = Some(u.refine_after.unwrap_or(0) + tokens_after);
                u.refine_delta = Some(u.refine_delta.unwrap_or(0) + tokens_before.saturating_sub(*tokens_after));
            }
            _ => {}
        }
    }
    u
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub total: UsageCounts,
    pub per_item: BTreeMap<String, UsageCounts>,
}

pub fn token_usage(traces: &[PipelineTrace]) -> TokenUsage {
    let mut out = TokenUsage::default();
    for t in traces {
        let u = trace_usage(t);
        out.total.add(&u);
        out.per_item.insert(t.item_id.clone(), u);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub item_count: usize,
    /// Cut-off for the retrieval metrics.
    pub retrieval_k: usize,
    pub recall_mode: RecallMode,
    /// Mean per metric over non-error items that have the metric.
    pub aggregate: BTreeMap<String, f64>,
    /// `null` for error items.
    pub per_item: BTreeMap<String, Option<BTreeMap<String, f64>>>,
    pub token_usage: TokenUsage,
    pub errors: Vec<ItemError>,
}

/// Scores one trace. Retrieval metrics appear only when the trace holds a
/// retrieval list.
pub fn score_trace(trace: &PipelineTrace, metrics: &[Metric], k: usize, mode: RecallMode) -> BTreeMap<String, f64> {
    let golds = &trace.golden_answers;
    let pred = &trace.final_answer;
    let retrieval = trace
        .primary_retrieval()
        .filter(|p| !p.is_empty())
        .map(|p| retrieval_metrics(p, golds, k, mode));
    let mut out = BTreeMap::new();
    for m in metrics {
        let v = match m {
            Metric::Em => Some(exact_match(pred, golds)),
            Metric::F1 => Some(token_f1(pred, golds)),
            Metric::Acc => Some(accuracy(pred, golds)),
            Metric::Bleu => Some(bleu(pred, golds)),
            Metric::RougeL => Some(rouge_l(pred, golds)),
            Metric::Recall => retrieval.map(|r| r.recall),
            Metric::Precision => retrieval.map(|r| r.precision),
            Metric::RetrievalF1 => retrieval.map(|r| r.f1),
            Metric::Map => retrieval.map(|r| r.average_precision),
        };
        debug_assert!(v.is_some() || m.is_retrieval());
        if let Some(v) = v {
            out.insert(m.key().to_string(), v);
        }
    }
    out
}

pub fn evaluate(traces: &[PipelineTrace], metrics: &[Metric], k: usize, mode: RecallMode) -> MetricReport {
    let scored: Vec<Option<BTreeMap<String, f64>>> = traces
        .par_iter()
        .map(|t| t.error.is_none().then(|| score_trace(t, metrics, k, mode)))
        .collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in scored.iter().flatten() {
        for (key, v) in s {
            let e = sums.entry(key.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    MetricReport {
        item_count: traces.len(),
        retrieval_k: k,
        recall_mode: mode,
        aggregate: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        per_item: traces.iter().map(|t| t.item_id.clone()).zip(scored).collect(),
        token_usage: token_usage(traces),
        errors: traces
            .iter()
            .filter_map(|t| {
                t.error.as_ref().map(|e| ItemError {
                    item_id: t.item_id.clone(),
                    error: e.clone(),
                })
            })
            .collect(),
    }
}

impl MetricReport {
    /// Header and one row of aggregate values, in column-name order.
    pub fn aggregate_csv(&self) -> String {
        let header: Vec<&str> = self.aggregate.keys().map(String::as_str).collect();
        let row: Vec<String> = self.aggregate.values().map(|v| format!("{v:.6}")).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
