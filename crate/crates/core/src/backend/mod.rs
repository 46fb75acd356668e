//! Pluggable text-generation and tool backends.
//!
//! One [`Backend`] trait serves every role (planner, executor, refiner,
//! summarizer); the roles differ only in the messages they send.

mod record;
mod remote;
mod scripted;
pub mod tools;

use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use record::RecordingBackend;
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{load_scenario, MatchKey, ScenarioEntry, ScenarioError, ScriptedBackend, ScriptedScenario, ToolFixture};
pub use tools::{ToolCallRecord, ToolCatalog, ToolError, ToolKind, ToolRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Message::new(Role::Tool, content)
    }
}

/// Stable hash of a request. Identical message lists give identical
/// fingerprints in every process.
pub fn fingerprint(messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        // Length-prefixing keeps ("ab","c") distinct from ("a","bc").
        hasher.update(m.role.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update((m.content.len() as u64).to_le_bytes());
        hasher.update(m.content.as_bytes());
    }
    let digest = hasher.finalize();
    hex::encode(&digest[..16])
}

/// Renders a request as plain text, the form pattern matchers see.
pub fn render_transcript(messages: &[Message]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push('[');
        out.push_str(m.role.as_str());
        out.push_str("]\n");
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

/// One request/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendExchange {
    pub messages: Vec<Message>,
    pub response: String,
    pub fingerprint: String,
    #[serde(with = "crate::time::millis")]
    pub latency: Duration,
}

impl BackendExchange {
    pub fn new(messages: Vec<Message>, response: String, latency: Duration) -> Self {
        let fingerprint = fingerprint(&messages);
        BackendExchange {
            messages,
            response,
            fingerprint,
            latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request has no messages")]
    EmptyRequest,
    #[error("no scripted response for request {fingerprint} (position {position})")]
    ScenarioMiss { fingerprint: String, position: usize },
    #[error("missing credentials: {0}")]
    Credentials(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("cannot restore backend cursor: {0}")]
    Cursor(String),
}

impl BackendError {
    /// Worth retrying: the same request may succeed later.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, messages: &[Message]) -> Result<BackendExchange, BackendError>;

    /// Replay position, for backends whose answers depend on call history.
    /// Saved into checkpoints so a resumed run continues the same script.
    fn cursor(&self) -> Option<serde_json::Value> {
        None
    }

    fn restore_cursor(&self, _cursor: &serde_json::Value) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Retry transient failures up to `retries` extra attempts.
pub async fn complete_with_retries(
    backend: &dyn Backend,
    messages: &[Message],
    retries: u32,
) -> Result<BackendExchange, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.complete(messages).await {
            Err(e) if e.is_transient() && attempt < retries => {
                attempt += 1;
                tracing::warn!(attempt, error = %e, "retrying backend call");
            }
            other => return other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_pure() {
        let a = vec![Message::system("s"), Message::user("hello")];
        let b = a.clone();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 32);
    }

    #[test]
    fn fingerprint_separates_boundaries_and_roles() {
        let a = vec![Message::user("ab"), Message::user("c")];
        let b = vec![Message::user("a"), Message::user("bc")];
        let c = vec![Message::assistant("ab"), Message::user("c")];
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_ne!(fingerprint(&a), fingerprint(&c));
    }

    #[test]
    fn fingerprint_is_stable_across_processes() {
        // Frozen value: recorded scenarios must keep resolving after upgrades.
        let msgs = vec![Message::system("planner"), Message::user("{}")];
        assert_eq!(fingerprint(&msgs), fingerprint(&msgs.clone()));
        let frozen = fingerprint(&msgs);
        assert_eq!(frozen, "b541f3a4fe8faf8a208127289789d84c");
    }
}
