//! Prompt assembly and the generator contract: chat completion with optional
//! token logprobs, and teacher-forced sequence scoring.

mod openai;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievedPassage;
use crate::transport::TransportError;

pub use openai::{OpenAiChatClient, OpenAiChatConfig};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("generator does not support {0}")]
    Unsupported(&'static str),
    #[error("prompt has ~{tokens} tokens, exceeding the input limit of {limit}")]
    ContextTooLong { tokens: usize, limit: usize },
    #[error("service rejected the prompt (~{tokens} tokens) as too long: {message}")]
    ContextRejected { tokens: usize, message: String },
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error("invalid generation parameters: {0}")]
    Params(String),
    #[error("malformed generator response: {0}")]
    Response(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub const DEFAULT_SYSTEM_TEMPLATE: &str = "Answer the question based on the given passage. \
Only give me the answer and do not output any other words. \
The following are given passages:\n{retrieval_passages}";
pub const DEFAULT_NAIVE_SYSTEM_TEMPLATE: &str =
    "Answer the question based on your own knowledge. Only give me the answer and do not output any other words.";
pub const DEFAULT_USER_TEMPLATE: &str = "Question: {question}";
pub const DEFAULT_DOC_FORMAT: &str = "Doc {index} (Title: {title}) {content}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplate {
    /// Must contain `{retrieval_passages}` once.
    pub system_template: String,
    /// System message used when there are no passages.
    pub naive_system_template: String,
    /// Must contain `{question}` once.
    pub user_template: String,
    /// Must contain `{index}`, `{title}` and `{content}` once each.
    pub doc_format: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_template: DEFAULT_SYSTEM_TEMPLATE.into(),
            naive_system_template: DEFAULT_NAIVE_SYSTEM_TEMPLATE.into(),
            user_template: DEFAULT_USER_TEMPLATE.into(),
            doc_format: DEFAULT_DOC_FORMAT.into(),
        }
    }
}

fn require_once(name: &str, template: &str, slot: &str) -> Result<(), GenerateError> {
    match template.matches(slot).count() {
        1 => Ok(()),
        n => Err(GenerateError::Template(format!(
            "{name} must contain `{slot}` exactly once (found {n})"
        ))),
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), GenerateError> {
        require_once("system_template", &self.system_template, "{retrieval_passages}")?;
        require_once("user_template", &self.user_template, "{question}")?;
        for slot in ["{index}", "{title}", "{content}"] {
            require_once("doc_format", &self.doc_format, slot)?;
        }
        Ok(())
    }

    pub fn format_passages(&self, passages: &[RetrievedPassage]) -> String {
        passages
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.doc_format
                    .replace("{index}", &(i + 1).to_string())
                    .replace("{title}", &p.title)
                    .replace("{content}", &p.contents)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn user(&self, question: &str) -> Message {
        Message::user(self.user_template.replace("{question}", question))
    }
}

/// System + user messages. With no passages the naive system message is used.
pub fn build_prompt(
    question: &str,
    passages: &[RetrievedPassage],
    template: &PromptTemplate,
) -> Result<Vec<Message>, GenerateError> {
    template.validate()?;
    if passages.is_empty() {
        return Ok(vec![
            Message::system(template.naive_system_template.clone()),
            template.user(question),
        ]);
    }
    let block = template.format_passages(passages);
    Ok(vec![
        Message::system(template.system_template.replace("{retrieval_passages}", &block)),
        template.user(question),
    ])
}

/// Like [`build_prompt`] with a pre-rendered context (e.g. refiner output).
pub fn build_prompt_with_context(
    question: &str,
    context: &str,
    template: &PromptTemplate,
) -> Result<Vec<Message>, GenerateError> {
    template.validate()?;
    Ok(vec![
        Message::system(template.system_template.replace("{retrieval_passages}", context)),
        template.user(question),
    ])
}

/// Whitespace token estimate over all message contents.
pub fn estimate_tokens(messages: &[Message]) -> usize {
    messages.iter().map(|m| m.content.split_whitespace().count()).sum()
}

fn default_max_input() -> usize {
    2048
}

fn default_max_new() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    #[serde(default = "default_max_input")]
    pub max_input_tokens: usize,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// 0 means greedy decoding.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub logprobs: bool,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_input_tokens: default_max_input(),
            max_new_tokens: default_max_new(),
            temperature: 0.0,
            logprobs: false,
            stop: Vec::new(),
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.max_new_tokens == 0 {
            return Err(GenerateError::Params("max_new_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GenerateError::Params("temperature must be >= 0".into()));
        }
        if self.max_input_tokens == 0 {
            return Err(GenerateError::Params("max_input_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub text: String,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Capabilities {
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default)]
    pub supports_scoring: bool,
}

/// A generation service.
pub trait Generator: Send + Sync {
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    /// One chat completion. Callers go through [`generate`], which validates
    /// parameters and enforces stop sequences.
    fn complete(&self, messages: &[Message], params: &GenerationParams) -> Result<GenerationOutput, GenerateError>;

    /// Per-token logprobs of `continuation` teacher-forced after `context`.
    fn score_tokens(&self, _context: &[Message], _continuation: &str) -> Result<Vec<TokenLogprob>, GenerateError> {
        Err(GenerateError::Unsupported("sequence scoring"))
    }

    fn probe(&self) -> Result<(), GenerateError> {
        Ok(())
    }
}

/// Cuts `output` at the earliest stop sequence, dropping logprobs of tokens
/// past the cut.
fn apply_stop(output: &mut GenerationOutput, stop: &[String]) {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| output.text.find(s.as_str()))
        .min();
    let Some(cut) = cut else {
        return;
    };
    output.text.truncate(cut);
    output.finish_reason = Some("stop".into());
    if let Some(lps) = &mut output.token_logprobs {
        let mut consumed = 0;
        let keep = lps
            .iter()
            .take_while(|t| {
                let fits = consumed + t.token.len() <= cut;
                consumed += t.token.len();
                fits
            })
            .count();
        lps.truncate(keep);
        output.token_count = keep;
    } else {
        output.token_count = output.text.split_whitespace().count();
    }
}

pub fn generate(
    client: &dyn Generator,
    messages: &[Message],
    params: &GenerationParams,
) -> Result<GenerationOutput, GenerateError> {
    params.validate()?;
    if params.logprobs && !client.capabilities().supports_logprobs {
        return Err(GenerateError::Unsupported("token logprobs"));
    }
    let tokens = estimate_tokens(messages);
    if tokens > params.max_input_tokens {
        return Err(GenerateError::ContextTooLong {
            tokens,
            limit: params.max_input_tokens,
        });
    }
    let mut out = client.complete(messages, params)?;
    apply_stop(&mut out, &params.stop);
    if !params.logprobs {
        out.token_logprobs = None;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    /// Sum of per-token logprobs; always <= 0.
    pub total_logprob: f64,
    pub token_count: usize,
}

pub fn score_sequence(
    client: &dyn Generator,
    context: &[Message],
    continuation: &str,
) -> Result<SequenceScore, GenerateError> {
    if !client.capabilities().supports_scoring {
        return Err(GenerateError::Unsupported("sequence scoring"));
    }
    if continuation.is_empty() {
        return Ok(SequenceScore {
            total_logprob: 0.0,
            token_count: 0,
        });
    }
    let tokens = client.score_tokens(context, continuation)?;
    Ok(SequenceScore {
        total_logprob: tokens.iter().map(|t| t.logprob.min(0.0)).sum(),
        token_count: tokens.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{ScriptedGenerator, ScriptedReply};

    fn passage(id: &str, title: &str, contents: &str) -> RetrievedPassage {
        RetrievedPassage {
            id: id.into(),
            title: title.into(),
            contents: contents.into(),
            score: 1.0,
            rank: 1,
        }
    }

    #[test]
    fn doc_listing_in_order() {
        let msgs = build_prompt(
            "q?",
            &[passage("1", "A", "alpha"), passage("2", "B", "beta")],
            &PromptTemplate::default(),
        )
        .unwrap();
        let sys = &msgs[0].content;
        let a = sys.find("Doc 1 (Title: A) alpha").unwrap();
        let b = sys.find("Doc 2 (Title: B) beta").unwrap();
        assert!(a < b);
        assert_eq!(msgs[1], Message::user("Question: q?"));
    }

    #[test]
    fn zero_passages_is_naive_prompt() {
        let msgs = build_prompt("Where?", &[], &PromptTemplate::default()).unwrap();
        assert_eq!(msgs[1].content, "Question: Where?");
        assert!(!msgs[0].content.contains("Doc"));
    }

    #[test]
    fn permuting_passages_only_changes_listing() {
        let t = PromptTemplate::default();
        let a = passage("1", "A", "alpha");
        let b = passage("2", "B", "beta");
        let ab = build_prompt("q", &[a.clone(), b.clone()], &t).unwrap();
        let ba = build_prompt("q", &[b, a], &t).unwrap();
        assert_eq!(ab[1], ba[1]);
        assert_eq!(
            ab[0].content.replace("Doc 1 (Title: A) alpha\nDoc 2 (Title: B) beta", "X"),
            ba[0].content.replace("Doc 1 (Title: B) beta\nDoc 2 (Title: A) alpha", "X"),
        );
        assert_eq!(build_prompt("q", &[], &t).unwrap(), build_prompt("q", &[], &t).unwrap());
    }

    #[test]
    fn template_slots_validated() {
        let t = PromptTemplate {
            user_template: "no slot".into(),
            ..Default::default()
        };
        assert!(matches!(build_prompt("q", &[], &t), Err(GenerateError::Template(_))));
        let t = PromptTemplate {
            doc_format: "{index} {index} {title} {content}".into(),
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn scripted_output_and_token_count() {
        let g = ScriptedGenerator::fixed("Paris");
        let out = generate(&g, &[Message::user("q")], &GenerationParams::default()).unwrap();
        assert_eq!(out.text, "Paris");
        assert_eq!(out.token_count, 1);
        assert!(out.token_logprobs.is_none());
    }

    #[test]
    fn logprobs_one_per_token() {
        let g = ScriptedGenerator::fixed("the big city");
        let params = GenerationParams {
            logprobs: true,
            ..Default::default()
        };
        let out = generate(&g, &[Message::user("q")], &params).unwrap();
        assert_eq!(out.token_logprobs.unwrap().len(), out.token_count);
    }

    #[test]
    fn stop_sequence_truncates() {
        let g = ScriptedGenerator::fixed("first line\nsecond line");
        let params = GenerationParams {
            stop: vec!["\n".into()],
            logprobs: true,
            ..Default::default()
        };
        let out = generate(&g, &[Message::user("q")], &params).unwrap();
        assert_eq!(out.text, "first line");
        assert!(!out.text.contains('\n'));
        assert_eq!(out.token_logprobs.unwrap().len(), 2);
    }

    #[test]
    fn overlong_prompt_errors() {
        let g = ScriptedGenerator::fixed("x");
        let params = GenerationParams {
            max_input_tokens: 3,
            ..Default::default()
        };
        let err = generate(&g, &[Message::user("one two three four")], &params).unwrap_err();
        assert!(matches!(err, GenerateError::ContextTooLong { tokens: 4, limit: 3 }));
    }

    #[test]
    fn invalid_params() {
        let g = ScriptedGenerator::fixed("x");
        let params = GenerationParams {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert!(generate(&g, &[], &params).is_err());
    }

    #[test]
    fn sequence_score_is_additive() {
        let g = ScriptedGenerator::fixed("x").with_scorer(|_, cont| {
            crate::mock::mock_tokenize(cont)
                .into_iter()
                .map(|token| TokenLogprob { token, logprob: -1.0 })
                .collect()
        });
        let s = score_sequence(&g, &[], "a b c").unwrap();
        assert_eq!(s.total_logprob, -3.0);
        assert_eq!(s.token_count, 3);
        assert_eq!(score_sequence(&g, &[], "").unwrap().total_logprob, 0.0);
    }

    #[test]
    fn mock_prefers_first_continuation() {
        let g = ScriptedGenerator::fixed("x").with_scorer(|_, cont| {
            let lp = if cont == "first" { -0.1 } else { -2.0 };
            vec![TokenLogprob {
                token: cont.to_string(),
                logprob: lp,
            }]
        });
        let first = score_sequence(&g, &[], "first").unwrap().total_logprob;
        let second = score_sequence(&g, &[], "second").unwrap().total_logprob;
        assert!(first > second);
    }

    #[test]
    fn scoring_requires_capability() {
        let g = ScriptedGenerator::new(|_, _| ScriptedReply::text("x"));
        assert!(matches!(
            score_sequence(&g, &[], "a"),
            Err(GenerateError::Unsupported(_))
        ));
    }
}
