//! Chat-completions HTTP client.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, BackendExchange, Message, Role};

pub const ENV_API_KEY: &str = "KNOWFLOW_API_KEY";
pub const ENV_BASE_URL: &str = "KNOWFLOW_BASE_URL";
pub const ENV_MODEL: &str = "KNOWFLOW_MODEL";

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "o4-mini";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: String,
    pub retries: u32,
    pub request_timeout: Duration,
}

impl RemoteConfig {
    /// Reads `KNOWFLOW_API_KEY` (required), `KNOWFLOW_BASE_URL` and `KNOWFLOW_MODEL`.
    pub fn from_env() -> Result<Self, BackendError> {
        let api_key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::Credentials(format!("{ENV_API_KEY} is not set")))?;
        Ok(RemoteConfig {
            base_url: std::env::var(ENV_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.to_owned()),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_owned()),
            api_key,
            retries: 2,
            request_timeout: Duration::from_secs(300),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// The wire API has no free-standing tool role; tool results travel as user turns.
fn wire_message(m: &Message) -> serde_json::Value {
    match m.role {
        Role::Tool => json!({ "role": "user", "content": format!("[tool result]\n{}", m.content) }),
        role => json!({ "role": role.as_str(), "content": m.content }),
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(RemoteBackend { config, client })
    }

    pub fn request_body(&self, messages: &[Message]) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": messages.iter().map(wire_message).collect::<Vec<_>>(),
        })
    }

    async fn call_once(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Credentials(format!("{status}: {text}")));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Transport(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("{status}: {text}")));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("response has no message content".into()))
    }
}

#[async_trait]
impl Backend for RemoteBackend {
    async fn complete(&self, messages: &[Message]) -> Result<BackendExchange, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyRequest);
        }
        let body = self.request_body(messages);
        let started = Instant::now();
        let mut attempt = 0;
        let response = loop {
            match self.call_once(&body).await {
                Err(e) if e.is_transient() && attempt < self.config.retries => {
                    attempt += 1;
                    tracing::warn!(attempt, error = %e, "chat completion failed, retrying");
                    tokio::time::sleep(Duration::from_millis(200 << attempt)).await;
                }
                other => break other?,
            }
        };
        Ok(BackendExchange::new(messages.to_vec(), response, started.elapsed()))
    }
}
