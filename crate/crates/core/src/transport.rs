//! Blocking HTTP+JSON transport with timeouts and bounded retries, shared by
//! the embedding, reranking and generation clients.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} failed after {attempts} attempt(s): {message}")]
    Request {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("{url} returned HTTP {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("could not decode response from {url}: {message}")]
    Decode { url: String, message: String },
    #[error("could not build HTTP client: {0}")]
    Client(String),
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    /// Full URL of the route, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    settings: HttpSettings,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(settings: HttpSettings) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(settings.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| TransportError::Client(e.to_string()))?;
        let api_key = settings
            .api_key_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());
        Ok(Self {
            client,
            settings,
            api_key,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.settings.endpoint
    }

    /// POSTs `body` and decodes the JSON reply. Connection errors, 429 and
    /// 5xx responses are retried with exponential backoff.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, TransportError> {
        let url = &self.settings.endpoint;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<R>().map_err(|e| TransportError::Decode {
                            url: url.clone(),
                            message: e.to_string(),
                        });
                    }
                    let body = resp.text().unwrap_or_default();
                    let err = TransportError::Status {
                        url: url.clone(),
                        status: status.as_u16(),
                        body,
                    };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => TransportError::Request {
                    url: url.clone(),
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt > self.settings.max_retries {
                return Err(match retryable {
                    TransportError::Request { url, message, .. } => TransportError::Request {
                        url,
                        attempts: attempt,
                        message,
                    },
                    other => other,
                });
            }
            let backoff = Duration::from_millis(50u64 << (attempt - 1).min(6));
            log::warn!("{url}: attempt {attempt} failed ({retryable}); retrying in {backoff:?}");
            std::thread::sleep(backoff);
        }
    }

    /// Reachability check: any HTTP response counts, transport failures do not.
    pub fn probe(&self) -> Result<(), TransportError> {
        self.client
            .get(&self.settings.endpoint)
            .send()
            .map(|_| ())
            .map_err(|e| TransportError::Request {
                url: self.settings.endpoint.clone(),
                attempts: 1,
                message: e.to_string(),
            })
    }
}
