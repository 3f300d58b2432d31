use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    estimate_tokens, Capabilities, GenerateError, GenerationOutput, GenerationParams, Generator, Message,
    TokenLogprob,
};
use crate::transport::{HttpSettings, HttpTransport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OpenAiChatConfig {
    pub http: HttpSettings,
    pub model: String,
    #[serde(default)]
    pub capabilities: Capabilities,
}

/// Client for an OpenAI-compatible `/v1/chat/completions` route.
///
/// Scoring sends the continuation as a trailing assistant message with
/// `echo: true` and reads back the echoed prompt-token logprobs.
pub struct OpenAiChatClient {
    transport: HttpTransport,
    config: OpenAiChatConfig,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    completion_tokens: Option<usize>,
}

impl OpenAiChatClient {
    pub fn new(config: OpenAiChatConfig) -> Result<Self, GenerateError> {
        Ok(Self {
            transport: HttpTransport::new(config.http.clone())?,
            config,
        })
    }

    fn send(&self, messages: &[Message], body: Value) -> Result<ChatResponse, GenerateError> {
        self.transport.post_json(&body).map_err(|e| match e {
            TransportError::Status { status: 400, body, .. } if body.to_lowercase().contains("context") => {
                GenerateError::ContextRejected {
                    tokens: estimate_tokens(messages),
                    message: body,
                }
            }
            other => other.into(),
        })
    }
}

impl Generator for OpenAiChatClient {
    fn name(&self) -> String {
        format!("openai:{}@{}", self.config.model, self.transport.endpoint())
    }

    fn capabilities(&self) -> Capabilities {
        self.config.capabilities
    }

    fn complete(&self, messages: &[Message], params: &GenerationParams) -> Result<GenerationOutput, GenerateError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "logprobs": params.logprobs,
        });
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        let resp = self.send(messages, body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GenerateError::Response("no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let token_logprobs = choice.logprobs.map(|l| l.content);
        let token_count = token_logprobs
            .as_ref()
            .map(Vec::len)
            .or(resp.usage.and_then(|u| u.completion_tokens))
            .unwrap_or_else(|| text.split_whitespace().count());
        if params.logprobs && token_logprobs.is_none() {
            return Err(GenerateError::Response("logprobs requested but not returned".into()));
        }
        Ok(GenerationOutput {
            text,
            token_count,
            token_logprobs,
            finish_reason: choice.finish_reason,
        })
    }

    fn score_tokens(&self, context: &[Message], continuation: &str) -> Result<Vec<TokenLogprob>, GenerateError> {
        if !self.config.capabilities.supports_scoring {
            return Err(GenerateError::Unsupported("sequence scoring"));
        }
        let mut messages = context.to_vec();
        messages.push(Message::assistant(continuation));
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": true,
            "echo": true,
        });
        let resp = self.send(&messages, body)?;
        let echoed = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| GenerateError::Response("scoring response has no logprobs".into()))?
            .content;
        let mut covered = 0;
        let mut out = Vec::new();
        for t in echoed {
            if covered >= continuation.len() {
                break;
            }
            covered += t.token.len();
            out.push(t);
        }
        if covered < continuation.len() {
            return Err(GenerateError::Response(format!(
                "echoed tokens cover {covered} of {} bytes",
                continuation.len()
            )));
        }
        Ok(out)
    }

    fn probe(&self) -> Result<(), GenerateError> {
        Ok(self.transport.probe()?)
    }
}
