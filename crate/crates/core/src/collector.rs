//! Frontier execution.
//!
//! Each round executes every dependency-satisfied node (except the query
//! node) concurrently. A node's executor conversation carries its task, the
//! contexts of its successful direct predecessors and the tool list; tool
//! calls go through a registry instance owned by that execution alone. A
//! successful trajectory is distilled into a short context for downstream
//! nodes.

use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_with_retries, Backend, BackendError, BackendExchange, Message, ToolCallRecord, ToolCatalog};
use crate::graph::{FlowGraph, FlowNode, GraphError, NodeId, NodeState};
use crate::json::from_relaxed;
use crate::prompts::Prompts;
use crate::time::{Clock, SystemClock};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub max_parallel: usize,
    #[serde(with = "crate::time::millis")]
    pub per_node_timeout: Duration,
    pub max_tool_calls: usize,
    /// Extra attempts after a transient backend failure.
    pub retries: u32,
    /// Upper bound on a distilled context, in characters.
    pub context_char_limit: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            max_parallel: 8,
            per_node_timeout: Duration::from_secs(120),
            max_tool_calls: 25,
            retries: 1,
            context_char_limit: 2000,
        }
    }
}

impl ExecutorConfig {
    pub fn check(&self) -> Result<(), CollectError> {
        if self.max_parallel == 0 {
            return Err(CollectError::InvalidInput("max_parallel must be at least 1".into()));
        }
        if self.max_tool_calls == 0 {
            return Err(CollectError::InvalidInput("max_tool_calls must be at least 1".into()));
        }
        if self.context_char_limit == 0 {
            return Err(CollectError::InvalidInput("context_char_limit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub node_id: NodeId,
    pub outcome_state: NodeState,
    /// Present exactly when the outcome is success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    /// Why the node failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub exchanges: Vec<BackendExchange>,
    pub tool_calls: Vec<ToolCallRecord>,
    #[serde(with = "crate::time::millis")]
    pub elapsed: Duration,
}

/// One step of an executor conversation, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrajectoryStep {
    Reply(String),
    Tool(ToolCallRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollectError {
    #[error("invalid collector input: {0}")]
    InvalidInput(String),
    /// Nothing besides the query node can run.
    #[error("no executable nodes in the frontier")]
    NoProgress,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistillError {
    #[error("cannot distill an empty trajectory")]
    EmptyTrajectory,
    #[error("distillation produced no text")]
    EmptySummary,
    #[error("distillation backend failed: {0}")]
    Backend(BackendError),
}

/// Contexts of `id`'s successful direct predecessors, ordered by node id.
pub fn upstream_contexts(graph: &FlowGraph, id: &str) -> Vec<(NodeId, String)> {
    graph
        .predecessors(id)
        .filter(|p| p.state == NodeState::Success)
        .filter_map(|p| p.context.clone().map(|c| (p.id.clone(), c)))
        .collect()
}

/// The executor's first user message for `node`.
pub fn task_message(node: &FlowNode, upstream: &[(NodeId, String)]) -> String {
    let mut text = format!("Task type: {}\nTask: {}\n\nUpstream knowledge:", node.task_type, node.description);
    if upstream.is_empty() {
        text.push_str(" none");
    }
    for (id, ctx) in upstream {
        text.push_str(&format!("\n[{id}] {ctx}"));
    }
    text
}

#[derive(Debug, PartialEq, Eq)]
enum Reply {
    ToolCall { name: String, arguments: String },
    Final(String),
    Failure(String),
}

fn parse_reply(text: &str) -> Reply {
    let Ok(value) = from_relaxed::<serde_json::Value>(text) else {
        return Reply::Final(text.trim().to_owned());
    };
    let as_text = |v: &serde_json::Value| match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if let Some(call) = value.get("tool_call") {
        let name = call.get("name").map(as_text).unwrap_or_default();
        let arguments = call.get("arguments").map(as_text).unwrap_or_default();
        return Reply::ToolCall { name, arguments };
    }
    if let Some(reason) = value.get("failure") {
        return Reply::Failure(as_text(reason));
    }
    if let Some(answer) = value.get("final") {
        return Reply::Final(as_text(answer));
    }
    Reply::Final(text.trim().to_owned())
}

fn tool_message(record: &ToolCallRecord) -> String {
    serde_json::json!({
        "tool": record.tool_name,
        "ok": record.ok,
        "result": record.result,
    })
    .to_string()
}

fn truncate_chars(text: &str, limit: usize) -> String {
    match text.char_indices().nth(limit) {
        Some((end, _)) => text[..end].to_owned(),
        None => text.to_owned(),
    }
}

/// Summarize a successful trajectory with one extra backend exchange.
pub async fn distill_context(
    backend: &dyn Backend,
    prompts: &Prompts,
    node: &FlowNode,
    trajectory: &[TrajectoryStep],
    config: &ExecutorConfig,
) -> Result<(String, BackendExchange), DistillError> {
    if trajectory.is_empty() {
        return Err(DistillError::EmptyTrajectory);
    }
    let mut body = format!("Task type: {}\nTask: {}\n\nTrajectory:", node.task_type, node.description);
    for step in trajectory {
        match step {
            TrajectoryStep::Reply(text) => body.push_str(&format!("\n[executor] {text}")),
            TrajectoryStep::Tool(call) => body.push_str(&format!(
                "\n[tool {} ok={}] {} => {}",
                call.tool_name, call.ok, call.arguments, call.result
            )),
        }
    }
    let messages = vec![Message::system(prompts.distill.clone()), Message::user(body)];
    let exchange = complete_with_retries(backend, &messages, config.retries)
        .await
        .map_err(DistillError::Backend)?;
    let summary = exchange.response.trim();
    if summary.is_empty() {
        return Err(DistillError::EmptySummary);
    }
    Ok((truncate_chars(summary, config.context_char_limit), exchange))
}

#[derive(Default)]
struct Progress {
    exchanges: Vec<BackendExchange>,
    tool_calls: Vec<ToolCallRecord>,
    trajectory: Vec<TrajectoryStep>,
}

type Outcome = Result<String, String>;

pub struct Collector {
    backend: Arc<dyn Backend>,
    tools: ToolCatalog,
    config: ExecutorConfig,
    prompts: Arc<Prompts>,
    clock: Arc<dyn Clock>,
}

impl Collector {
    pub fn new(backend: Arc<dyn Backend>, tools: ToolCatalog, config: ExecutorConfig, prompts: Arc<Prompts>) -> Self {
        Collector {
            backend,
            tools,
            config,
            prompts,
            clock: Arc::new(SystemClock::default()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    fn system_message(&self) -> Message {
        let mut text = self.prompts.executor.clone();
        text.push_str("\n\nTools:");
        for (name, kind) in self.tools.availability() {
            text.push_str(&format!("\n- {name} ({kind})"));
        }
        Message::system(text)
    }

    /// Run the executor conversation until it reaches a final or failure reply.
    async fn drive(&self, node: &FlowNode, upstream: &[(NodeId, String)], progress: &mut Progress) -> Outcome {
        let mut registry = self.tools.instantiate();
        let mut messages = vec![self.system_message(), Message::user(task_message(node, upstream))];
        loop {
            let exchange = complete_with_retries(self.backend.as_ref(), &messages, self.config.retries)
                .await
                .map_err(|e| format!("executor backend failed: {e}"))?;
            let raw = exchange.response.clone();
            progress.exchanges.push(exchange);
            progress.trajectory.push(TrajectoryStep::Reply(raw.clone()));
            match parse_reply(&raw) {
                Reply::Failure(reason) => return Err(format!("executor reported failure: {reason}")),
                Reply::Final(answer) if answer.trim().is_empty() => {
                    return Err("executor returned an empty result".into())
                }
                Reply::Final(_) => break,
                Reply::ToolCall { name, arguments } => {
                    if progress.tool_calls.len() >= self.config.max_tool_calls {
                        return Err(format!(
                            "tool-call budget of {} exceeded",
                            self.config.max_tool_calls
                        ));
                    }
                    let record = registry
                        .invoke(&name, &arguments)
                        .await
                        .map_err(|e| format!("executor requested {e}"))?;
                    messages.push(Message::assistant(raw));
                    messages.push(Message::tool(tool_message(&record)));
                    progress.trajectory.push(TrajectoryStep::Tool(record.clone()));
                    progress.tool_calls.push(record);
                }
            }
        }
        let (context, exchange) = distill_context(
            self.backend.as_ref(),
            &self.prompts,
            node,
            &progress.trajectory,
            &self.config,
        )
        .await
        .map_err(|e| e.to_string())?;
        progress.exchanges.push(exchange);
        Ok(context)
    }

    /// Execute one pending node. Timeouts, backend failures and exhausted
    /// tool budgets produce a failure record, not an error.
    pub async fn execute_node(
        &self,
        node: &FlowNode,
        upstream: &[(NodeId, String)],
    ) -> Result<ExecutionRecord, CollectError> {
        if node.state != NodeState::Pending {
            return Err(CollectError::InvalidInput(format!(
                "node {} is {}, not pending",
                node.id, node.state
            )));
        }
        let start = self.clock.now();
        let mut progress = Progress::default();
        let outcome = match tokio::time::timeout(
            self.config.per_node_timeout,
            self.drive(node, upstream, &mut progress),
        )
        .await
        {
            Ok(outcome) => outcome,
            Err(_) => Err(format!(
                "timed out after {} ms",
                self.config.per_node_timeout.as_millis()
            )),
        };
        let (outcome_state, context, diagnostic) = match outcome {
            Ok(ctx) => (NodeState::Success, Some(ctx), None),
            Err(why) => {
                tracing::info!(node = %node.id, %why, "node failed");
                (NodeState::Failure, None, Some(why))
            }
        };
        Ok(ExecutionRecord {
            node_id: node.id.clone(),
            outcome_state,
            context,
            diagnostic,
            exchanges: progress.exchanges,
            tool_calls: progress.tool_calls,
            elapsed: self.clock.since(start),
        })
    }

    /// Non-query frontier nodes: the set one round executes.
    pub fn executable(graph: &FlowGraph) -> Vec<NodeId> {
        let query = graph.query_node_id();
        graph.frontier().into_iter().filter(|id| id != query).collect()
    }

    /// Execute the whole executable frontier with bounded parallelism and
    /// merge the outcomes. Records come back ordered by node id.
    pub async fn collect_round(&self, graph: &FlowGraph) -> Result<(FlowGraph, Vec<ExecutionRecord>), CollectError> {
        self.config.check()?;
        let ids = Self::executable(graph);
        if ids.is_empty() {
            return Err(CollectError::NoProgress);
        }
        let jobs: Vec<(FlowNode, Vec<(NodeId, String)>)> = ids
            .iter()
            .map(|id| {
                let node = graph.node(id.as_str()).expect("frontier ids exist").clone();
                (node, upstream_contexts(graph, id.as_str()))
            })
            .collect();
        let results: Vec<Result<ExecutionRecord, CollectError>> = stream::iter(jobs.iter())
            .map(|(node, upstream)| self.execute_node(node, upstream))
            .buffer_unordered(self.config.max_parallel)
            .collect()
            .await;
        let mut records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        records.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        let mut merged = graph.clone();
        for record in &records {
            merged = merged.with_outcome(record.node_id.as_str(), record.outcome_state, record.context.clone())?;
        }
        Ok((merged, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tools::{MockResults, Tool, ToolFactory, ToolKind, ToolOutput};
    use crate::backend::{MatchKey, ScenarioEntry, ScriptedBackend, ScriptedScenario};
    use crate::graph::fixtures::{minimal, report_flow};
    use crate::graph::TaskType;
    use async_trait::async_trait;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn patterns(pairs: &[(&str, &str)]) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(ScriptedScenario {
            entries: pairs
                .iter()
                .map(|(p, r)| ScenarioEntry {
                    key: MatchKey::pattern(p).unwrap(),
                    response: (*r).to_owned(),
                })
                .collect(),
            ..Default::default()
        }))
    }

    fn collector(backend: Arc<ScriptedBackend>, tools: ToolCatalog) -> Collector {
        Collector::new(backend, tools, ExecutorConfig::default(), Arc::new(Prompts::default()))
    }

    fn n1() -> FlowNode {
        FlowNode::pending(
            "n1",
            TaskType::Search,
            "Use search_wiki_revision to get Carl Nebel Wikipedia revision (Aug 2023)",
        )
    }

    #[test]
    fn replies_are_classified() {
        assert_eq!(
            parse_reply(r#"{"tool_call": {"name": "ocr2text", "arguments": {"path": "a.png"}}}"#),
            Reply::ToolCall {
                name: "ocr2text".into(),
                arguments: r#"{"path":"a.png"}"#.into()
            }
        );
        assert_eq!(parse_reply(r#"{"final": "done"}"#), Reply::Final("done".into()));
        assert_eq!(parse_reply(r#"{"failure": "no page"}"#), Reply::Failure("no page".into()));
        assert_eq!(parse_reply("just text"), Reply::Final("just text".into()));
    }

    #[tokio::test]
    async fn tool_assisted_success() {
        let backend = patterns(&[
            (r"^\[system\]\nRole: knowledge distiller", "Revision 2023-08-05T13:53:28Z has oldid 1168855983."),
            (r"\[tool\]\n", r#"{"final": "found oldid 1168855983"}"#),
            (
                r"Task: Use search_wiki_revision",
                r#"{"tool_call": {"name": "search_wiki_revision", "arguments": "Carl Nebel, 2023, 8"}}"#,
            ),
        ]);
        let mut results = MockResults::default();
        results.insert("Carl Nebel, 2023, 8", "revision 2023-08-05T13:53:28Z oldid 1168855983", true);
        let mut tools = ToolCatalog::standard();
        tools.set_mock("search_wiki_revision", results);
        let record = collector(backend, tools).execute_node(&n1(), &[]).await.unwrap();
        assert_eq!(record.outcome_state, NodeState::Success);
        assert!(record.context.as_deref().unwrap().contains("oldid 1168855983"));
        assert_eq!(record.tool_calls.len(), 1);
        assert_eq!(record.exchanges.len(), 3);
    }

    #[tokio::test]
    async fn failure_marker() {
        let backend = patterns(&[("Task:", r#"{"failure": "revision not found"}"#)]);
        let record = collector(backend, ToolCatalog::standard())
            .execute_node(&n1(), &[])
            .await
            .unwrap();
        assert_eq!(record.outcome_state, NodeState::Failure);
        assert!(record.context.is_none());
        assert!(record.diagnostic.unwrap().contains("revision not found"));
    }

    #[tokio::test]
    async fn upstream_contexts_are_ordered_in_the_request() {
        let backend = patterns(&[("distiller", "summary"), ("Task:", "plain answer")]);
        let c = collector(backend.clone(), ToolCatalog::standard());
        let upstream = vec![
            (NodeId::from("a"), "alpha ctx".to_owned()),
            (NodeId::from("b"), "beta ctx".to_owned()),
        ];
        c.execute_node(&n1(), &upstream).await.unwrap();
        let first = &backend.requests()[0][1].content;
        let a = first.find("[a] alpha ctx").unwrap();
        let b = first.find("[b] beta ctx").unwrap();
        assert!(a < b);
        assert!(first.contains("Task type: search"));
    }

    #[tokio::test]
    async fn tool_budget_is_enforced() {
        let backend = patterns(&[("Task:", r#"{"tool_call": {"name": "search_google", "arguments": "x"}}"#)]);
        let mut c = collector(backend, ToolCatalog::standard());
        c.config.max_tool_calls = 3;
        let record = c.execute_node(&n1(), &[]).await.unwrap();
        assert_eq!(record.outcome_state, NodeState::Failure);
        assert_eq!(record.tool_calls.len(), 3);
        assert!(record.diagnostic.unwrap().contains("budget"));
    }

    #[tokio::test]
    async fn unknown_tool_fails_the_node() {
        let backend = patterns(&[("Task:", r#"{"tool_call": {"name": "teleport", "arguments": "x"}}"#)]);
        let record = collector(backend, ToolCatalog::standard())
            .execute_node(&n1(), &[])
            .await
            .unwrap();
        assert_eq!(record.outcome_state, NodeState::Failure);
        assert!(record.tool_calls.is_empty());
    }

    struct Slow;

    #[async_trait]
    impl Backend for Slow {
        async fn complete(&self, messages: &[Message]) -> Result<BackendExchange, BackendError> {
            tokio::time::sleep(Duration::from_secs(60)).await;
            Ok(BackendExchange::new(messages.to_vec(), "late".into(), Duration::ZERO))
        }
    }

    #[tokio::test]
    async fn timeout_is_a_failure_outcome() {
        let mut c = Collector::new(
            Arc::new(Slow),
            ToolCatalog::standard(),
            ExecutorConfig::default(),
            Arc::new(Prompts::default()),
        );
        c.config.per_node_timeout = Duration::from_millis(50);
        let record = c.execute_node(&n1(), &[]).await.unwrap();
        assert_eq!(record.outcome_state, NodeState::Failure);
        assert!(record.diagnostic.unwrap().contains("timed out"));
    }

    #[tokio::test]
    async fn distill_guards_and_bounds() {
        let backend = patterns(&[("distiller", &"x".repeat(5000))]);
        let prompts = Prompts::default();
        let config = ExecutorConfig::default();
        assert_eq!(
            distill_context(backend.as_ref(), &prompts, &n1(), &[], &config).await,
            Err(DistillError::EmptyTrajectory)
        );
        let (ctx, _) = distill_context(
            backend.as_ref(),
            &prompts,
            &n1(),
            &[TrajectoryStep::Reply("done".into())],
            &config,
        )
        .await
        .unwrap();
        assert_eq!(ctx.chars().count(), 2000);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("ééé", 2), "éé");
        assert_eq!(truncate_chars("ab", 5), "ab");
    }

    #[tokio::test]
    async fn rounds_follow_the_layers() {
        let backend = patterns(&[("distiller", "ctx"), ("Task:", "ok")]);
        let c = collector(backend, ToolCatalog::standard());
        let g0 = report_flow();
        let (g1, r1) = c.collect_round(&g0).await.unwrap();
        let ids: Vec<&str> = r1.iter().map(|r| r.node_id.as_str()).collect();
        assert_eq!(ids, ["n3", "n4s", "n7"]);
        let (g2, r2) = c.collect_round(&g1).await.unwrap();
        let ids: Vec<&str> = r2.iter().map(|r| r.node_id.as_str()).collect();
        assert_eq!(ids, ["n2", "n4", "n6"]);
        assert_eq!(c.collect_round(&g2).await.unwrap_err(), CollectError::NoProgress);
        // Only state and context changed.
        assert_eq!(g2.edges(), g0.edges());
        for (a, b) in g0.nodes().iter().zip(g2.nodes()) {
            assert_eq!((&a.id, a.task_type, &a.description), (&b.id, b.task_type, &b.description));
        }
    }

    #[tokio::test]
    async fn query_alone_is_no_progress() {
        let g = FlowGraph::new("q").unwrap();
        let c = collector(patterns(&[]), ToolCatalog::standard());
        assert_eq!(c.collect_round(&g).await.unwrap_err(), CollectError::NoProgress);
    }

    struct Counting {
        instances: Arc<AtomicUsize>,
    }

    struct CountingTool {
        calls: usize,
    }

    #[async_trait]
    impl Tool for CountingTool {
        async fn call(&mut self, _arguments: &str) -> ToolOutput {
            self.calls += 1;
            tokio::task::yield_now().await;
            ToolOutput {
                result: format!("count={}", self.calls),
                ok: true,
            }
        }
    }

    impl ToolFactory for Counting {
        fn kind(&self) -> ToolKind {
            ToolKind::Mock
        }
        fn instantiate(&self, _name: &str) -> Box<dyn Tool> {
            self.instances.fetch_add(1, Ordering::SeqCst);
            Box::new(CountingTool { calls: 0 })
        }
    }

    #[tokio::test]
    async fn concurrent_nodes_get_their_own_tools() {
        let backend = patterns(&[
            ("distiller", "ctx"),
            (r#"count=2"[^\n]*\n$"#, r#"{"final": "done"}"#),
            (r#"count=1"[^\n]*\n$"#, r#"{"tool_call": {"name": "counter", "arguments": ""}}"#),
            (r"Upstream knowledge: none\n$", r#"{"tool_call": {"name": "counter", "arguments": ""}}"#),
        ]);
        let instances = Arc::new(AtomicUsize::new(0));
        let mut tools = ToolCatalog::empty();
        tools.set_factory(
            "counter",
            Arc::new(Counting {
                instances: Arc::clone(&instances),
            }),
        );
        let c = collector(backend, tools);
        let (_, records) = c.collect_round(&minimal()).await.unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            let counts: Vec<&str> = r.tool_calls.iter().map(|t| t.result.as_str()).collect();
            assert_eq!(counts, ["count=1", "count=2"]);
        }
        assert_eq!(instances.load(Ordering::SeqCst), 2);
    }
}
