use super::prompts::{SELF_ASK_FINAL, SELF_ASK_FOLLOW_UP, SELF_ASK_INTERMEDIATE, SELF_ASK_OPENER};
use super::{Extras, Pipeline, PipelineError, Recorder, FLAG_TRUNCATED, FLAG_UNPARSED};
use crate::corpus::sentence_spans;
use crate::generate::{build_prompt, GenerationOutput, GenerationParams, Message};
use crate::retrieval::RetrievedPassage;

/// What a Self-Ask generation asks for next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelfAskMove {
    /// The final answer.
    Final(String),
    /// A follow-up question and the generated text up to and including it.
    FollowUp { question: String, consumed: String },
    /// No marker at all.
    Unparsed,
}

/// Scans lines in order; the first marker found decides.
pub fn parse_self_ask(text: &str) -> SelfAskMove {
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if let Some(pos) = line.find(SELF_ASK_FINAL) {
            return SelfAskMove::Final(line[pos + SELF_ASK_FINAL.len()..].trim().to_string());
        }
        if let Some(q) = line.trim_start().strip_prefix(SELF_ASK_FOLLOW_UP) {
            return SelfAskMove::FollowUp {
                question: q.trim().to_string(),
                consumed: lines[..=i].join("\n"),
            };
        }
    }
    SelfAskMove::Unparsed
}

/// FLARE retrieval query: the sentence's tokens at or above `theta`, trimmed
/// and space-joined. Falls back to `fallback` when nothing survives.
pub fn flare_query(tokens: &[(&str, f64)], theta: f64, fallback: &str) -> String {
    let kept: Vec<&str> = tokens
        .iter()
        .filter(|(_, p)| *p >= theta)
        .map(|(t, _)| t.trim())
        .filter(|t| !t.is_empty())
        .collect();
    if kept.is_empty() {
        fallback.to_string()
    } else {
        kept.join(" ")
    }
}

/// Byte span and probability of each emitted token.
fn token_spans(out: &GenerationOutput) -> Vec<(usize, usize, f64)> {
    let mut offset = 0;
    out.token_logprobs
        .iter()
        .flatten()
        .map(|t| {
            let s = offset;
            offset += t.token.len();
            (s, offset, t.logprob.exp())
        })
        .collect()
}

/// Tokens overlapping `[start, end)` that carry non-whitespace text.
fn tokens_in<'a>(text: &'a str, spans: &[(usize, usize, f64)], start: usize, end: usize) -> Vec<(&'a str, f64)> {
    spans
        .iter()
        .filter(|(s, e, _)| *s < end && *e > start && *e <= text.len())
        .map(|(s, e, p)| (&text[*s..*e], *p))
        .filter(|(t, _)| !t.trim().is_empty())
        .collect()
}

impl Pipeline {
    pub(super) fn self_ask(&self, question: &str, rec: &mut Recorder, extras: &mut Extras) -> Result<String, PipelineError> {
        let examples = &self.cfg.templates.self_ask_examples;
        let params = GenerationParams {
            stop: vec![SELF_ASK_INTERMEDIATE.to_string()],
            ..self.cfg.generation.clone()
        };
        let mut scratch = String::new();
        let mut rounds = 0;
        let mut last_intermediate: Option<String> = None;
        loop {
            let prompt = format!("{examples}\n\nQuestion: {question}\n{SELF_ASK_OPENER}{scratch}");
            let out = self.generate_step(vec![Message::user(prompt)], &params, Some("self_ask".into()), rec)?;
            match parse_self_ask(&out.text) {
                SelfAskMove::Final(answer) => return Ok(answer),
                SelfAskMove::Unparsed => {
                    extras.flag(FLAG_UNPARSED);
                    return Ok(out.text.trim().to_string());
                }
                SelfAskMove::FollowUp { question: follow_up, consumed } => {
                    if rounds == self.cfg.max_rounds {
                        extras.flag(FLAG_TRUNCATED);
                        return Ok(last_intermediate.unwrap_or_else(|| out.text.trim().to_string()));
                    }
                    rounds += 1;
                    let passages = self.retrieve_step(&follow_up, self.cfg.top_k, rec)?;
                    let qa = build_prompt(&follow_up, &passages, &self.cfg.prompt)?;
                    let ans = self.generate_step(qa, &self.cfg.generation, Some("intermediate".into()), rec)?;
                    let ans = ans.text.trim().lines().next().unwrap_or("").to_string();
                    scratch.push_str(consumed.trim_end());
                    scratch.push_str(&format!("\n{SELF_ASK_INTERMEDIATE} {ans}\n"));
                    last_intermediate = Some(ans);
                }
            }
        }
    }

    /// Looks ahead one generation at a time. The first sentence holding a
    /// token below theta triggers retrieval with that sentence (minus its
    /// uncertain tokens) and is regenerated over the fresh passages.
    pub(super) fn flare(&self, question: &str, rec: &mut Recorder, _extras: &mut Extras) -> Result<String, PipelineError> {
        let theta = self.cfg.flare_theta;
        let mut budget = self.cfg.generation.max_new_tokens;
        let mut passages: Vec<RetrievedPassage> = Vec::new();
        let mut answer = String::new();
        let mut first = true;
        while budget > 0 {
            let params = GenerationParams {
                max_new_tokens: budget,
                logprobs: theta > 0.0,
                ..self.cfg.generation.clone()
            };
            let messages = self.flare_messages(question, &passages, &answer)?;
            let label = (!first).then(|| "lookahead".to_string());
            first = false;
            let out = self.generate_step(messages, &params, label, rec)?;
            if out.text.is_empty() {
                break;
            }
            let spans = token_spans(&out);
            let trigger = sentence_spans(&out.text).into_iter().find_map(|(s, e)| {
                let toks = tokens_in(&out.text, &spans, s, e);
                toks.iter().any(|(_, p)| *p < theta).then_some((s, toks))
            });
            let Some((start, toks)) = trigger else {
                answer.push_str(&out.text);
                break;
            };
            let accepted = &out.text[..start];
            answer.push_str(accepted);
            budget = budget.saturating_sub(spans.iter().filter(|(_, e, _)| *e <= start).count());
            if budget == 0 {
                break;
            }
            let query = flare_query(&toks, theta, question);
            passages = self.retrieve_step(&query, self.cfg.top_k, rec)?;
            let retry = GenerationParams {
                max_new_tokens: budget,
                logprobs: theta > 0.0,
                ..self.cfg.generation.clone()
            };
            let messages = self.flare_messages(question, &passages, &answer)?;
            let out = self.generate_step(messages, &retry, Some("regenerate".into()), rec)?;
            let Some(&(_, end)) = sentence_spans(&out.text).first() else {
                break;
            };
            answer.push_str(&out.text[..end]);
            let used = token_spans(&out).iter().filter(|(s, _, _)| *s < end).count().max(1);
            budget = budget.saturating_sub(used);
        }
        Ok(answer.trim().to_string())
    }

    /// QA prompt over the current passages, continuing the partial answer.
    fn flare_messages(
        &self,
        question: &str,
        passages: &[RetrievedPassage],
        answer: &str,
    ) -> Result<Vec<Message>, PipelineError> {
        let mut messages = build_prompt(question, passages, &self.cfg.prompt)?;
        if !answer.is_empty() {
            messages.push(Message::assistant(answer));
        }
        Ok(messages)
    }
}
