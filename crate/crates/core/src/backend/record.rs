//! Record a live run so it can be replayed as a scripted scenario.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;

use super::scripted::{MatchKey, ScenarioEntry, ScriptedScenario, ToolFixture};
use super::tools::ToolCallRecord;
use super::{Backend, BackendError, BackendExchange, Message};

/// Passes requests through to `inner` and keeps every successful exchange.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    exchanges: Mutex<Vec<BackendExchange>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        RecordingBackend {
            inner,
            exchanges: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<BackendExchange> {
        self.exchanges.lock().unwrap().clone()
    }

    /// Fingerprint-keyed scenario reproducing the recorded responses. When the
    /// same request was answered twice, the first answer is kept.
    pub fn to_scenario(&self, tool_calls: &[ToolCallRecord]) -> ScriptedScenario {
        let mut seen = BTreeSet::new();
        let entries = self
            .exchanges()
            .into_iter()
            .filter(|ex| seen.insert(ex.fingerprint.clone()))
            .map(|ex| ScenarioEntry {
                key: MatchKey::Fingerprint(ex.fingerprint),
                response: ex.response,
            })
            .collect();
        let mut seen_tools = BTreeSet::new();
        let tools = tool_calls
            .iter()
            .filter(|c| seen_tools.insert((c.tool_name.clone(), c.arguments.trim().to_owned())))
            .map(|c| ToolFixture {
                name: c.tool_name.clone(),
                args_key: c.arguments.trim().to_owned(),
                result: c.result.clone(),
                ok: c.ok,
            })
            .collect();
        ScriptedScenario {
            entries,
            tools,
            strict: true,
        }
    }
}

#[async_trait]
impl Backend for RecordingBackend {
    async fn complete(&self, messages: &[Message]) -> Result<BackendExchange, BackendError> {
        let exchange = self.inner.complete(messages).await?;
        self.exchanges.lock().unwrap().push(exchange.clone());
        Ok(exchange)
    }

    fn cursor(&self) -> Option<serde_json::Value> {
        self.inner.cursor()
    }

    fn restore_cursor(&self, cursor: &serde_json::Value) -> Result<(), BackendError> {
        self.inner.restore_cursor(cursor)
    }
}
