//! Iterative flow expansion.
//!
//! Starting from the lone query node, the planner backend is asked to grow
//! the graph one step at a time. Each reply must be a strict superset of the
//! previous graph; the engine checks this itself and re-prompts on violations.
//! Planning stops when the backend returns its input unchanged or the
//! iteration cap is reached.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendExchange, Message};
use crate::graph::{parse_graph, serialize_graph, FlowEdge, FlowGraph, FlowNode, GraphDraft, NodeId, NodeState, TaskType};
use crate::json::from_relaxed;
use crate::prompts::Prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    #[default]
    Flow,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub max_iterations: u32,
    pub repair_attempts: u32,
    pub mode: PlannerMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            max_iterations: 8,
            repair_attempts: 2,
            mode: PlannerMode::Flow,
        }
    }
}

impl PlannerConfig {
    pub fn check(&self) -> Result<(), PlannerError> {
        if self.max_iterations == 0 {
            return Err(PlannerError::InvalidInput("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionStep {
    pub iteration: u32,
    pub before: FlowGraph,
    pub after: FlowGraph,
    pub changed: bool,
    pub added_node_ids: BTreeSet<NodeId>,
    pub added_edge_pairs: BTreeSet<(NodeId, NodeId)>,
    /// Every exchange of this step, repairs included.
    pub exchanges: Vec<BackendExchange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlannerError {
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
    #[error("planner output rejected: {reason}")]
    Output {
        raw: String,
        reason: String,
        exchanges: Vec<BackendExchange>,
    },
    #[error("planner backend failed: {source}")]
    Backend {
        source: BackendError,
        exchanges: Vec<BackendExchange>,
    },
}

impl PlannerError {
    pub fn exchanges(&self) -> &[BackendExchange] {
        match self {
            PlannerError::InvalidInput(_) => &[],
            PlannerError::Output { exchanges, .. } | PlannerError::Backend { exchanges, .. } => exchanges,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanOutcome {
    pub graph: FlowGraph,
    pub steps: Vec<ExpansionStep>,
    pub reached_fixpoint: bool,
}

/// A failed `plan`, with the steps accepted before the failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{error}")]
pub struct PlanFailure {
    pub error: PlannerError,
    pub steps: Vec<ExpansionStep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequentialPlan {
    pub graph: FlowGraph,
    pub exchanges: Vec<BackendExchange>,
}

/// The single user message sent for one expansion step.
pub fn expansion_request(prompts: &Prompts, graph: &FlowGraph) -> String {
    format!("{}\n\nInput graph:\n{}", prompts.planner, serialize_graph(graph))
}

type Delta = (BTreeSet<NodeId>, BTreeSet<(NodeId, NodeId)>);

/// The expansion gate: `after` must keep every node and edge of `before`
/// untouched, add only pending nodes, and attach each new edge to a new node.
pub fn check_expansion(before: &FlowGraph, after: &FlowGraph) -> Result<Delta, String> {
    if after.query_node_id() != before.query_node_id() {
        return Err(format!(
            "query node changed from {} to {}",
            before.query_node_id(),
            after.query_node_id()
        ));
    }
    for node in before.nodes() {
        match after.node(node.id.as_str()) {
            None => return Err(format!("node {} was removed", node.id)),
            Some(n) if n != node => return Err(format!("node {} was modified", node.id)),
            Some(_) => {}
        }
    }
    for edge in before.edges() {
        match after.edge(edge.from.as_str(), edge.to.as_str()) {
            None => return Err(format!("edge {}->{} was removed", edge.from, edge.to)),
            Some(e) if e != edge => return Err(format!("edge {}->{} was modified", edge.from, edge.to)),
            Some(_) => {}
        }
    }
    let mut added_nodes = BTreeSet::new();
    for node in after.nodes().iter().filter(|n| !before.contains(n.id.as_str())) {
        if node.state != NodeState::Pending {
            return Err(format!("new node {} is not pending", node.id));
        }
        added_nodes.insert(node.id.clone());
    }
    let mut added_edges = BTreeSet::new();
    for edge in after
        .edges()
        .iter()
        .filter(|e| before.edge(e.from.as_str(), e.to.as_str()).is_none())
    {
        if !added_nodes.contains(&edge.from) && !added_nodes.contains(&edge.to) {
            return Err(format!(
                "new edge {}->{} connects two existing nodes",
                edge.from, edge.to
            ));
        }
        added_edges.insert((edge.from.clone(), edge.to.clone()));
    }
    Ok((added_nodes, added_edges))
}

fn repair_message(reason: &str) -> Message {
    Message::user(format!(
        "The previous reply was rejected: {reason}. Reply again with the corrected JSON only."
    ))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StepList {
    Wrapped { steps: Vec<SequentialStep> },
    Bare(Vec<SequentialStep>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequentialStep {
    task_type: TaskType,
    content: String,
}

fn chain_from_steps(query: &str, text: &str) -> Result<FlowGraph, String> {
    let steps = match from_relaxed::<StepList>(text).map_err(|e| e.message)? {
        StepList::Wrapped { steps } | StepList::Bare(steps) => steps,
    };
    let mut base = FlowGraph::new(query).map_err(|e| e.to_string())?.to_draft();
    let query_id = base.nodes[0].id.clone();
    let mut ids: Vec<NodeId> = Vec::with_capacity(steps.len());
    for (i, step) in steps.into_iter().enumerate() {
        if step.task_type == TaskType::Answer {
            return Err(format!("step {} has task type answer", i + 1));
        }
        let id = NodeId::new(format!("s{}", i + 1));
        base.nodes.push(FlowNode::pending(id.clone(), step.task_type, step.content));
        ids.push(id);
    }
    ids.push(query_id);
    base.edges = ids
        .windows(2)
        .map(|w| FlowEdge::new(w[0].clone(), w[1].clone(), "next"))
        .collect();
    FlowGraph::try_from_draft(GraphDraft {
        nodes: base.nodes,
        edges: base.edges,
    })
    .map_err(|e| e.to_string())
}

pub struct Planner {
    backend: Arc<dyn Backend>,
    config: PlannerConfig,
    prompts: Arc<Prompts>,
}

impl Planner {
    pub fn new(backend: Arc<dyn Backend>, config: PlannerConfig, prompts: Arc<Prompts>) -> Self {
        Planner {
            backend,
            config,
            prompts,
        }
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    /// Ask the backend to expand `graph` once, re-prompting on rejected output.
    pub async fn expand_once(&self, graph: &FlowGraph, iteration: u32) -> Result<ExpansionStep, PlannerError> {
        if let Some(node) = graph.nodes().iter().find(|n| n.state != NodeState::Pending) {
            return Err(PlannerError::InvalidInput(format!(
                "node {} is {}; planning needs an unexecuted graph",
                node.id, node.state
            )));
        }
        let mut messages = vec![Message::user(expansion_request(&self.prompts, graph))];
        let mut exchanges = Vec::new();
        for attempt in 0..=self.config.repair_attempts {
            let exchange = match self.backend.complete(&messages).await {
                Ok(ex) => ex,
                Err(source) => return Err(PlannerError::Backend { source, exchanges }),
            };
            let raw = exchange.response.clone();
            exchanges.push(exchange);
            let verdict = parse_graph(&raw)
                .map_err(|e| e.to_string())
                .and_then(|after| check_expansion(graph, &after).map(|delta| (after, delta)));
            match verdict {
                Ok((after, (added_node_ids, added_edge_pairs))) => {
                    let changed = !added_node_ids.is_empty() || !added_edge_pairs.is_empty();
                    return Ok(ExpansionStep {
                        iteration,
                        before: graph.clone(),
                        after,
                        changed,
                        added_node_ids,
                        added_edge_pairs,
                        exchanges,
                    });
                }
                Err(reason) if attempt == self.config.repair_attempts => {
                    return Err(PlannerError::Output { raw, reason, exchanges });
                }
                Err(reason) => {
                    tracing::debug!(attempt, %reason, "planner output rejected, re-prompting");
                    messages.push(Message::assistant(raw));
                    messages.push(repair_message(&reason));
                }
            }
        }
        unreachable!("loop returns on its last attempt")
    }

    /// Expand until a fixpoint or `max_iterations` steps.
    pub async fn plan(&self, query: &str) -> Result<PlanOutcome, PlanFailure> {
        let fail = |error, steps| PlanFailure { error, steps };
        if let Err(e) = self.config.check() {
            return Err(fail(e, Vec::new()));
        }
        let mut graph = FlowGraph::new(query)
            .map_err(|e| fail(PlannerError::InvalidInput(e.to_string()), Vec::new()))?;
        let mut steps = Vec::new();
        let mut reached_fixpoint = false;
        for iteration in 0..self.config.max_iterations {
            let step = match self.expand_once(&graph, iteration).await {
                Ok(step) => step,
                Err(e) => return Err(fail(e, steps)),
            };
            graph = step.after.clone();
            let changed = step.changed;
            steps.push(step);
            if !changed {
                reached_fixpoint = true;
                break;
            }
        }
        Ok(PlanOutcome {
            graph,
            steps,
            reached_fixpoint,
        })
    }

    /// Linear baseline: one ordered step list, chained in order into the query node.
    pub async fn plan_sequential(&self, query: &str) -> Result<SequentialPlan, PlannerError> {
        if query.trim().is_empty() {
            return Err(PlannerError::InvalidInput("query must not be empty".into()));
        }
        let mut messages = vec![Message::user(format!(
            "{}\n\nObjective:\n{}",
            self.prompts.sequential_planner, query
        ))];
        let mut exchanges = Vec::new();
        for attempt in 0..=self.config.repair_attempts {
            let exchange = match self.backend.complete(&messages).await {
                Ok(ex) => ex,
                Err(source) => return Err(PlannerError::Backend { source, exchanges }),
            };
            let raw = exchange.response.clone();
            exchanges.push(exchange);
            match chain_from_steps(query, &raw) {
                Ok(graph) => return Ok(SequentialPlan { graph, exchanges }),
                Err(reason) if attempt == self.config.repair_attempts => {
                    return Err(PlannerError::Output { raw, reason, exchanges });
                }
                Err(reason) => {
                    messages.push(Message::assistant(raw));
                    messages.push(repair_message(&reason));
                }
            }
        }
        unreachable!("loop returns on its last attempt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MatchKey, ScenarioEntry, ScriptedBackend, ScriptedScenario};
    use crate::graph::fixtures::minimal;

    const BOX: &str = r#"{"nodes": [
        {"node_id": "n1", "task_type": "answer", "content": "<query>"},
        {"node_id": "n2", "task_type": "solve", "content": "<subtask>"},
        {"node_id": "n3", "task_type": "search", "content": "<subtask>"}],
      "edges": [
        {"from": "n2", "to": "n1", "relationship": "solve subtask"},
        {"from": "n3", "to": "n1", "relationship": "provide information"}]}"#;

    fn scripted(responses: &[&str]) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(ScriptedScenario {
            entries: responses
                .iter()
                .enumerate()
                .map(|(i, r)| ScenarioEntry {
                    key: MatchKey::Position(i),
                    response: (*r).to_owned(),
                })
                .collect(),
            ..Default::default()
        }))
    }

    fn planner(backend: Arc<ScriptedBackend>, config: PlannerConfig) -> Planner {
        Planner::new(backend, config, Arc::new(Prompts::default()))
    }

    fn single(query_id: &str) -> FlowGraph {
        FlowGraph::try_from_draft(GraphDraft {
            nodes: vec![FlowNode::pending(query_id, TaskType::Answer, "<query>")],
            edges: vec![],
        })
        .unwrap()
    }

    #[tokio::test]
    async fn expansion_adds_nodes() {
        let p = planner(scripted(&[BOX]), PlannerConfig::default());
        let step = p.expand_once(&single("n1"), 0).await.unwrap();
        assert!(step.changed);
        assert_eq!(step.added_node_ids, ["n2", "n3"].iter().map(|s| NodeId::from(*s)).collect());
        assert_eq!(step.added_edge_pairs.len(), 2);
        assert_eq!(step.after, minimal());
    }

    #[tokio::test]
    async fn echo_is_a_fixpoint() {
        let text = serialize_graph(&minimal());
        let p = planner(scripted(&[&text]), PlannerConfig::default());
        let step = p.expand_once(&minimal(), 3).await.unwrap();
        assert!(!step.changed);
        assert_eq!(step.after, step.before);
        assert_eq!(step.iteration, 3);
    }

    #[tokio::test]
    async fn deletion_is_rejected_after_repairs() {
        let without_n2 = r#"{"nodes": [
            {"node_id": "n1", "task_type": "answer", "content": "<query>"},
            {"node_id": "n3", "task_type": "search", "content": "<subtask>"}],
          "edges": [{"from": "n3", "to": "n1", "relationship": "provide information"}]}"#;
        let backend = scripted(&[without_n2, without_n2, without_n2]);
        let p = planner(backend.clone(), PlannerConfig::default());
        match p.expand_once(&minimal(), 0).await {
            Err(PlannerError::Output { raw, reason, exchanges }) => {
                assert_eq!(raw, without_n2);
                assert!(reason.contains("n2"));
                assert_eq!(exchanges.len(), 3);
            }
            other => panic!("expected output error, got {other:?}"),
        }
        // Re-prompts carry the rejected reply and the reason.
        let last = backend.requests().pop().unwrap();
        assert_eq!(last.len(), 5);
        assert!(last[4].content.contains("rejected"));
    }

    #[tokio::test]
    async fn repair_recovers() {
        let p = planner(scripted(&["not json", BOX]), PlannerConfig::default());
        let step = p.expand_once(&single("n1"), 0).await.unwrap();
        assert_eq!(step.exchanges.len(), 2);
        assert!(step.changed);
    }

    #[tokio::test]
    async fn edges_between_old_nodes_are_rejected() {
        let extra = BOX.replace(
            r#"{"from": "n3", "to": "n1", "relationship": "provide information"}]"#,
            r#"{"from": "n3", "to": "n1", "relationship": "provide information"},
               {"from": "n3", "to": "n2", "relationship": "x"}]"#,
        );
        let p = planner(
            scripted(&[&extra]),
            PlannerConfig {
                repair_attempts: 0,
                ..Default::default()
            },
        );
        let err = p.expand_once(&minimal(), 0).await.unwrap_err();
        assert!(matches!(err, PlannerError::Output { ref reason, .. } if reason.contains("existing")));
    }

    #[tokio::test]
    async fn executed_graphs_are_refused() {
        let g = minimal().with_outcome("n2", NodeState::Failure, None).unwrap();
        let p = planner(scripted(&[]), PlannerConfig::default());
        assert!(matches!(p.expand_once(&g, 0).await, Err(PlannerError::InvalidInput(_))));
    }

    #[tokio::test]
    async fn plan_stops_at_fixpoint() {
        let expanded = r#"{"nodes": [
            {"node_id": "task", "task_type": "answer", "content": "q"},
            {"node_id": "a", "task_type": "search", "content": "look up"}],
          "edges": [{"from": "a", "to": "task", "relationship": "informs"}]}"#;
        let p = planner(scripted(&[expanded, expanded]), PlannerConfig::default());
        let out = p.plan("q").await.unwrap();
        assert_eq!(out.steps.len(), 2);
        assert!(out.steps[0].changed);
        assert!(!out.steps[1].changed);
        assert!(out.reached_fixpoint);
        assert_eq!(out.graph.nodes().len(), 2);
    }

    #[tokio::test]
    async fn plan_respects_the_iteration_cap() {
        let grow = |n: usize| {
            let nodes: Vec<String> = (0..n)
                .map(|i| format!(r#"{{"node_id": "s{i}", "task_type": "search", "content": "step {i}"}}"#))
                .collect();
            let edges: Vec<String> = (0..n)
                .map(|i| format!(r#"{{"from": "s{i}", "to": "task", "relationship": "r"}}"#))
                .collect();
            format!(
                r#"{{"nodes": [{{"node_id": "task", "task_type": "answer", "content": "q"}}, {}], "edges": [{}]}}"#,
                nodes.join(","),
                edges.join(",")
            )
        };
        let responses: Vec<String> = (1..=5).map(grow).collect();
        let refs: Vec<&str> = responses.iter().map(String::as_str).collect();
        let p = planner(
            scripted(&refs),
            PlannerConfig {
                max_iterations: 3,
                ..Default::default()
            },
        );
        let out = p.plan("q").await.unwrap();
        assert_eq!(out.steps.len(), 3);
        assert!(out.steps.iter().all(|s| s.changed));
        assert!(!out.reached_fixpoint);
        assert!(out.graph.nodes().iter().all(|n| n.state == NodeState::Pending));
    }

    #[tokio::test]
    async fn plan_failure_keeps_accepted_steps() {
        let expanded = r#"{"nodes": [
            {"node_id": "task", "task_type": "answer", "content": "q"},
            {"node_id": "a", "task_type": "search", "content": "look up"}],
          "edges": [{"from": "a", "to": "task", "relationship": "informs"}]}"#;
        let p = planner(
            scripted(&[expanded, "garbage"]),
            PlannerConfig {
                repair_attempts: 0,
                ..Default::default()
            },
        );
        let failure = p.plan("q").await.unwrap_err();
        assert_eq!(failure.steps.len(), 1);
        assert_eq!(failure.error.exchanges().len(), 1);
    }

    #[tokio::test]
    async fn sequential_chain() {
        let steps = r#"{"steps": [
            {"task_type": "search", "content": "find"},
            {"task_type": "solve", "content": "compute"},
            {"task_type": "solve", "content": "check"}]}"#;
        let p = planner(scripted(&[steps]), PlannerConfig::default());
        let plan = p.plan_sequential("q").await.unwrap();
        assert_eq!(plan.graph.nodes().len(), 4);
        let layers = plan.graph.topological_layers();
        assert_eq!(layers.len(), 4);
        assert!(layers.iter().all(|l| l.len() == 1));
        assert_eq!(layers[0][0], NodeId::from("s1"));
        assert_eq!(layers[3][0], NodeId::from("task"));
    }

    #[tokio::test]
    async fn sequential_empty_plan_is_the_query_alone() {
        let p = planner(scripted(&["[]"]), PlannerConfig::default());
        let plan = p.plan_sequential("q").await.unwrap();
        assert_eq!(plan.graph.nodes().len(), 1);
        assert!(plan.graph.edges().is_empty());
    }

    #[tokio::test]
    async fn sequential_rejects_unstructured_output() {
        let p = planner(
            scripted(&["first search, then solve"]),
            PlannerConfig {
                repair_attempts: 0,
                ..Default::default()
            },
        );
        assert!(matches!(p.plan_sequential("q").await, Err(PlannerError::Output { .. })));
    }

    #[test]
    fn config_check() {
        let bad = PlannerConfig {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        assert!(PlannerConfig::default().check().is_ok());
    }
}
