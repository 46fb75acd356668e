//! Tool catalog and per-execution tool registries.
//!
//! A [`ToolCatalog`] is an immutable, shareable description of which tools
//! exist and how each is backed. Every node execution calls
//! [`ToolCatalog::instantiate`] to get its own [`ToolRegistry`], so per-tool
//! state (call counters, sessions) never leaks between concurrent nodes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tools the executor prompt advertises by default.
pub const STANDARD_TOOLS: [&str; 13] = [
    "search_google",
    "search_wiki",
    "search_wiki_revision",
    "search_archived_webpage",
    "extract_document_content",
    "extract_url_content",
    "ask_question_about_image",
    "ask_question_about_audio",
    "ask_question_about_video",
    "download_media_from_url",
    "execute_code",
    "browse_url",
    "ocr2text",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Mock,
    HttpStub,
    Disabled,
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolKind::Mock => "mock",
            ToolKind::HttpStub => "http_stub",
            ToolKind::Disabled => "disabled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub result: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub tool_name: String,
    pub arguments: String,
    pub result: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    Unknown(String),
}

/// A live tool instance, owned by exactly one node execution.
#[async_trait]
pub trait Tool: Send {
    async fn call(&mut self, arguments: &str) -> ToolOutput;
}

/// Produces fresh tool instances.
pub trait ToolFactory: Send + Sync {
    fn kind(&self) -> ToolKind;
    fn instantiate(&self, name: &str) -> Box<dyn Tool>;
}

struct DisabledTool {
    name: String,
}

#[async_trait]
impl Tool for DisabledTool {
    async fn call(&mut self, _arguments: &str) -> ToolOutput {
        ToolOutput {
            result: format!("tool `{}` is not available in this deployment", self.name),
            ok: false,
        }
    }
}

struct DisabledFactory;

impl ToolFactory for DisabledFactory {
    fn kind(&self) -> ToolKind {
        ToolKind::Disabled
    }

    fn instantiate(&self, name: &str) -> Box<dyn Tool> {
        Box::new(DisabledTool { name: name.to_owned() })
    }
}

/// Canned results keyed by the exact (trimmed) argument text. The key `*`
/// answers any arguments without a specific entry.
#[derive(Debug, Clone, Default)]
pub struct MockResults {
    by_args: BTreeMap<String, ToolOutput>,
}

impl MockResults {
    pub fn insert(&mut self, args_key: &str, result: impl Into<String>, ok: bool) {
        self.by_args.insert(
            args_key.trim().to_owned(),
            ToolOutput {
                result: result.into(),
                ok,
            },
        );
    }

    fn lookup(&self, arguments: &str) -> Option<&ToolOutput> {
        self.by_args
            .get(arguments.trim())
            .or_else(|| self.by_args.get("*"))
    }
}

struct MockTool {
    name: String,
    results: Arc<MockResults>,
}

#[async_trait]
impl Tool for MockTool {
    async fn call(&mut self, arguments: &str) -> ToolOutput {
        match self.results.lookup(arguments) {
            Some(out) => out.clone(),
            None => ToolOutput {
                result: format!("mock `{}` has no result for arguments {arguments:?}", self.name),
                ok: false,
            },
        }
    }
}

struct MockFactory {
    results: Arc<MockResults>,
}

impl ToolFactory for MockFactory {
    fn kind(&self) -> ToolKind {
        ToolKind::Mock
    }

    fn instantiate(&self, name: &str) -> Box<dyn Tool> {
        Box::new(MockTool {
            name: name.to_owned(),
            results: Arc::clone(&self.results),
        })
    }
}

/// Forwards each call as one JSON POST `{"tool", "arguments"}` to `url`.
/// A JSON reply `{"result", "ok"}` is used as-is; any other body is the
/// result text, with `ok` taken from the HTTP status.
struct HttpStubTool {
    name: String,
    url: String,
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct StubReply {
    result: String,
    ok: bool,
}

#[async_trait]
impl Tool for HttpStubTool {
    async fn call(&mut self, arguments: &str) -> ToolOutput {
        let body = serde_json::json!({ "tool": self.name, "arguments": arguments });
        let response = match self.client.post(&self.url).json(&body).send().await {
            Ok(r) => r,
            Err(e) => {
                return ToolOutput {
                    result: format!("http stub request failed: {e}"),
                    ok: false,
                }
            }
        };
        let status = response.status();
        match response.text().await {
            Ok(text) => match serde_json::from_str::<StubReply>(&text) {
                Ok(reply) => ToolOutput {
                    result: reply.result,
                    ok: reply.ok && status.is_success(),
                },
                Err(_) => ToolOutput {
                    result: text,
                    ok: status.is_success(),
                },
            },
            Err(e) => ToolOutput {
                result: format!("http stub body unreadable: {e}"),
                ok: false,
            },
        }
    }
}

struct HttpStubFactory {
    url: String,
    client: reqwest::Client,
}

impl ToolFactory for HttpStubFactory {
    fn kind(&self) -> ToolKind {
        ToolKind::HttpStub
    }

    fn instantiate(&self, name: &str) -> Box<dyn Tool> {
        Box::new(HttpStubTool {
            name: name.to_owned(),
            url: self.url.clone(),
            client: self.client.clone(),
        })
    }
}

#[derive(Clone)]
pub struct ToolCatalog {
    tools: BTreeMap<String, Arc<dyn ToolFactory>>,
}

impl fmt::Debug for ToolCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.availability()).finish()
    }
}

impl Default for ToolCatalog {
    fn default() -> Self {
        ToolCatalog::standard()
    }
}

impl ToolCatalog {
    pub fn empty() -> Self {
        ToolCatalog { tools: BTreeMap::new() }
    }

    /// Every standard tool registered as disabled.
    pub fn standard() -> Self {
        let mut catalog = ToolCatalog::empty();
        for name in STANDARD_TOOLS {
            catalog.set_disabled(name);
        }
        catalog
    }

    pub fn set_factory(&mut self, name: &str, factory: Arc<dyn ToolFactory>) -> &mut Self {
        self.tools.insert(name.to_owned(), factory);
        self
    }

    pub fn set_disabled(&mut self, name: &str) -> &mut Self {
        self.set_factory(name, Arc::new(DisabledFactory))
    }

    pub fn set_mock(&mut self, name: &str, results: MockResults) -> &mut Self {
        self.set_factory(
            name,
            Arc::new(MockFactory {
                results: Arc::new(results),
            }),
        )
    }

    pub fn set_http_stub(&mut self, name: &str, url: &str) -> &mut Self {
        self.set_factory(
            name,
            Arc::new(HttpStubFactory {
                url: url.to_owned(),
                client: reqwest::Client::new(),
            }),
        )
    }

    pub fn kind(&self, name: &str) -> Option<ToolKind> {
        self.tools.get(name).map(|f| f.kind())
    }

    /// `(name, kind)` for every registered tool, sorted by name.
    pub fn availability(&self) -> Vec<(String, ToolKind)> {
        self.tools
            .iter()
            .map(|(name, f)| (name.clone(), f.kind()))
            .collect()
    }

    /// Fresh, independent tool instances for one node execution.
    pub fn instantiate(&self) -> ToolRegistry {
        ToolRegistry {
            tools: self
                .tools
                .iter()
                .map(|(name, f)| (name.clone(), f.instantiate(name)))
                .collect(),
        }
    }
}

/// Tool instances owned by a single node execution.
pub struct ToolRegistry {
    tools: BTreeMap<String, Box<dyn Tool>>,
}

impl ToolRegistry {
    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub async fn invoke(&mut self, tool_name: &str, arguments: &str) -> Result<ToolCallRecord, ToolError> {
        let tool = self
            .tools
            .get_mut(tool_name)
            .ok_or_else(|| ToolError::Unknown(tool_name.to_owned()))?;
        let out = tool.call(arguments).await;
        Ok(ToolCallRecord {
            tool_name: tool_name.to_owned(),
            arguments: arguments.to_owned(),
            result: out.result,
            ok: out.ok,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counter {
        calls: usize,
    }

    #[async_trait]
    impl Tool for Counter {
        async fn call(&mut self, _arguments: &str) -> ToolOutput {
            self.calls += 1;
            ToolOutput {
                result: self.calls.to_string(),
                ok: true,
            }
        }
    }

    struct CounterFactory;

    impl ToolFactory for CounterFactory {
        fn kind(&self) -> ToolKind {
            ToolKind::Mock
        }
        fn instantiate(&self, _name: &str) -> Box<dyn Tool> {
            Box::new(Counter { calls: 0 })
        }
    }

    #[tokio::test]
    async fn mock_results_by_arguments() {
        let mut results = MockResults::default();
        results.insert(
            "Carl Nebel, 2023, 8",
            "revision 2023-08-05T13:53:28Z oldid 1168855983",
            true,
        );
        let mut catalog = ToolCatalog::standard();
        catalog.set_mock("search_wiki_revision", results);
        let mut registry = catalog.instantiate();
        let record = registry
            .invoke("search_wiki_revision", " Carl Nebel, 2023, 8 ")
            .await
            .unwrap();
        assert!(record.ok);
        assert!(record.result.contains("oldid 1168855983"));
        let miss = registry.invoke("search_wiki_revision", "other").await.unwrap();
        assert!(!miss.ok);
    }

    #[tokio::test]
    async fn wildcard_key() {
        let mut results = MockResults::default();
        results.insert("*", "anything", true);
        let mut catalog = ToolCatalog::empty();
        catalog.set_mock("search_google", results);
        let record = catalog.instantiate().invoke("search_google", "q").await.unwrap();
        assert_eq!(record.result, "anything");
    }

    #[tokio::test]
    async fn disabled_tool_reports_unavailable() {
        let mut registry = ToolCatalog::standard().instantiate();
        let record = registry.invoke("browse_url", "https://example.org").await.unwrap();
        assert!(!record.ok);
        assert!(record.result.contains("not available"));
    }

    #[tokio::test]
    async fn unknown_tool_is_an_error() {
        let mut registry = ToolCatalog::standard().instantiate();
        assert_eq!(
            registry.invoke("teleport", "x").await.unwrap_err(),
            ToolError::Unknown("teleport".into())
        );
    }

    #[tokio::test]
    async fn instances_do_not_share_state() {
        let mut catalog = ToolCatalog::empty();
        catalog.set_factory("count", Arc::new(CounterFactory));
        let mut a = catalog.instantiate();
        let mut b = catalog.instantiate();
        a.invoke("count", "").await.unwrap();
        a.invoke("count", "").await.unwrap();
        assert_eq!(a.invoke("count", "").await.unwrap().result, "3");
        assert_eq!(b.invoke("count", "").await.unwrap().result, "1");
    }

    #[test]
    fn standard_catalog_lists_all_tools_disabled() {
        let avail = ToolCatalog::standard().availability();
        assert_eq!(avail.len(), 13);
        assert!(avail.iter().all(|(_, k)| *k == ToolKind::Disabled));
    }
}
