//! Graph rewriting between collect rounds.
//!
//! A refinement plan is an ordered list of six operations. Plans apply
//! all-or-nothing: the graph either moves to a new valid state or stays
//! exactly as it was.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_with_retries, Backend, BackendError, BackendExchange, Message};
use crate::graph::{serialize_graph, FlowEdge, FlowGraph, FlowNode, GraphError, NodeId, NodeState, TaskType, ValidationReport};
use crate::json::from_relaxed;
use crate::prompts::Prompts;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", deny_unknown_fields)]
pub enum GraphOp {
    AddNode {
        node_id: NodeId,
        task_type: TaskType,
        content: String,
    },
    DelNode {
        node_id: NodeId,
    },
    ModNode {
        node_id: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_type: Option<TaskType>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        content: Option<String>,
    },
    AddEdge {
        from: NodeId,
        to: NodeId,
        relationship: String,
    },
    DelEdge {
        from: NodeId,
        to: NodeId,
    },
    ModEdge {
        from: NodeId,
        to: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        relationship: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        new_from: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        new_to: Option<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementPlan {
    #[serde(default)]
    pub ops: Vec<GraphOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl RefinementPlan {
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpError {
    #[error("malformed operation: {0}")]
    Malformed(String),
    #[error("no such {0}")]
    MissingTarget(String),
    #[error("{0} already exists")]
    Duplicate(String),
    #[error("query node {0} cannot be deleted or retyped")]
    Protected(NodeId),
    #[error("operation breaks the graph: {0}")]
    Structural(ValidationReport),
}

/// A rejected plan: the first failing op and its position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("op {index} rejected: {error}")]
pub struct PlanError {
    pub index: usize,
    pub error: OpError,
}

fn revalidate(draft: crate::graph::GraphDraft) -> Result<FlowGraph, OpError> {
    FlowGraph::try_from_draft(draft).map_err(|e| match e {
        GraphError::Structural(report) => OpError::Structural(report),
        other => OpError::Malformed(other.to_string()),
    })
}

fn require_id(id: &NodeId) -> Result<(), OpError> {
    if id.as_str().trim().is_empty() {
        return Err(OpError::Malformed("empty node id".into()));
    }
    Ok(())
}

fn require_node(graph: &FlowGraph, id: &NodeId) -> Result<(), OpError> {
    require_id(id)?;
    if !graph.contains(id.as_str()) {
        return Err(OpError::MissingTarget(format!("node {id}")));
    }
    Ok(())
}

fn require_edge(graph: &FlowGraph, from: &NodeId, to: &NodeId) -> Result<(), OpError> {
    require_id(from)?;
    require_id(to)?;
    if graph.edge(from.as_str(), to.as_str()).is_none() {
        return Err(OpError::MissingTarget(format!("edge {from}->{to}")));
    }
    Ok(())
}

/// Apply one operation, returning the new graph.
///
/// Deleting a node removes its incident edges. Changing a node's description
/// returns it to pending and drops its context when it had already run.
pub fn apply_op(graph: &FlowGraph, op: &GraphOp) -> Result<FlowGraph, OpError> {
    let query = graph.query_node_id();
    let mut draft = graph.to_draft();
    match op {
        GraphOp::AddNode {
            node_id,
            task_type,
            content,
        } => {
            require_id(node_id)?;
            if graph.contains(node_id.as_str()) {
                return Err(OpError::Duplicate(format!("node {node_id}")));
            }
            draft
                .nodes
                .push(FlowNode::pending(node_id.clone(), *task_type, content.clone()));
        }
        GraphOp::DelNode { node_id } => {
            require_node(graph, node_id)?;
            if node_id == query {
                return Err(OpError::Protected(node_id.clone()));
            }
            draft.nodes.retain(|n| n.id != *node_id);
            draft.edges.retain(|e| e.from != *node_id && e.to != *node_id);
        }
        GraphOp::ModNode {
            node_id,
            task_type,
            content,
        } => {
            require_node(graph, node_id)?;
            if task_type.is_none() && content.is_none() {
                return Err(OpError::Malformed(format!("ModNode {node_id} changes nothing")));
            }
            if node_id == query && task_type.is_some_and(|t| t != TaskType::Answer) {
                return Err(OpError::Protected(node_id.clone()));
            }
            let node = draft.node_mut(node_id.as_str()).expect("checked above");
            if let Some(t) = task_type {
                node.task_type = *t;
            }
            if let Some(text) = content {
                if *text != node.description {
                    node.description = text.clone();
                    if node.state.is_terminal() {
                        node.state = NodeState::Pending;
                        node.context = None;
                    }
                }
            }
        }
        GraphOp::AddEdge { from, to, relationship } => {
            require_node(graph, from)?;
            require_node(graph, to)?;
            if graph.edge(from.as_str(), to.as_str()).is_some() {
                return Err(OpError::Duplicate(format!("edge {from}->{to}")));
            }
            draft
                .edges
                .push(FlowEdge::new(from.clone(), to.clone(), relationship.clone()));
        }
        GraphOp::DelEdge { from, to } => {
            require_edge(graph, from, to)?;
            let at = draft.edge_position(from.as_str(), to.as_str()).expect("checked above");
            draft.edges.remove(at);
        }
        GraphOp::ModEdge {
            from,
            to,
            relationship,
            new_from,
            new_to,
        } => {
            require_edge(graph, from, to)?;
            if relationship.is_none() && new_from.is_none() && new_to.is_none() {
                return Err(OpError::Malformed(format!("ModEdge {from}->{to} changes nothing")));
            }
            let at = draft.edge_position(from.as_str(), to.as_str()).expect("checked above");
            let old = draft.edges.remove(at);
            let target_from = new_from.clone().unwrap_or_else(|| from.clone());
            let target_to = new_to.clone().unwrap_or_else(|| to.clone());
            require_node(graph, &target_from)?;
            require_node(graph, &target_to)?;
            let moved = target_from != *from || target_to != *to;
            if moved && graph.edge(target_from.as_str(), target_to.as_str()).is_some() {
                return Err(OpError::Duplicate(format!("edge {target_from}->{target_to}")));
            }
            draft.edges.push(FlowEdge::new(
                target_from,
                target_to,
                relationship.clone().unwrap_or(old.relation),
            ));
        }
    }
    revalidate(draft)
}

/// Apply every op in order. On failure the input graph is left as it was.
pub fn apply_plan(graph: &FlowGraph, plan: &RefinementPlan) -> Result<FlowGraph, PlanError> {
    let mut current = graph.clone();
    for (index, op) in plan.ops.iter().enumerate() {
        current = apply_op(&current, op).map_err(|error| PlanError { index, error })?;
    }
    Ok(current)
}

/// Parse a refiner reply. `no changes` (any case, optional punctuation or
/// quotes) is the empty plan.
pub fn parse_plan(text: &str) -> Result<RefinementPlan, String> {
    let bare = text
        .trim()
        .trim_matches(|c: char| c == '"' || c == '`' || c == '.' || c == '\'')
        .trim();
    if bare.eq_ignore_ascii_case("no changes") {
        return Ok(RefinementPlan::default());
    }
    from_relaxed::<RefinementPlan>(text).map_err(|e| e.message)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub repair_attempts: u32,
    /// Extra attempts after a transient backend failure.
    pub retries: u32,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            repair_attempts: 2,
            retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    pub graph: FlowGraph,
    /// The applied plan; empty when the refiner asked for no changes or
    /// every attempt was rejected.
    pub plan: RefinementPlan,
    pub exchanges: Vec<BackendExchange>,
    /// True when the repair budget ran out and the empty plan was used.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("invalid refiner input: {0}")]
    InvalidInput(String),
    #[error("refiner backend failed: {source}")]
    Backend {
        source: BackendError,
        exchanges: Vec<BackendExchange>,
    },
}

/// The single user message sent to open a refinement.
pub fn refinement_request(prompts: &Prompts, graph: &FlowGraph) -> String {
    format!("{}\n\nCurrent graph:\n{}", prompts.refiner, serialize_graph(graph))
}

pub struct Refiner {
    backend: Arc<dyn Backend>,
    config: RefinerConfig,
    prompts: Arc<Prompts>,
}

impl Refiner {
    pub fn new(backend: Arc<dyn Backend>, config: RefinerConfig, prompts: Arc<Prompts>) -> Self {
        Refiner {
            backend,
            config,
            prompts,
        }
    }

    /// Ask the backend for a plan and apply it, re-prompting on rejected
    /// plans. After the repair budget the graph is returned unchanged.
    pub async fn refine(&self, graph: &FlowGraph) -> Result<RefineOutcome, RefineError> {
        if !graph.nodes().iter().any(|n| n.state.is_terminal()) {
            return Err(RefineError::InvalidInput(
                "refinement needs at least one executed node".into(),
            ));
        }
        let mut messages = vec![Message::user(refinement_request(&self.prompts, graph))];
        let mut exchanges = Vec::new();
        for attempt in 0..=self.config.repair_attempts {
            let exchange = match complete_with_retries(self.backend.as_ref(), &messages, self.config.retries).await {
                Ok(ex) => ex,
                Err(source) => return Err(RefineError::Backend { source, exchanges }),
            };
            let raw = exchange.response.clone();
            exchanges.push(exchange);
            let verdict = parse_plan(&raw).and_then(|plan| {
                apply_plan(graph, &plan)
                    .map(|g| (g, plan))
                    .map_err(|e| e.to_string())
            });
            match verdict {
                Ok((graph, plan)) => {
                    return Ok(RefineOutcome {
                        graph,
                        plan,
                        exchanges,
                        degraded: false,
                    })
                }
                Err(reason) if attempt == self.config.repair_attempts => {
                    tracing::warn!(%reason, "refinement repair budget exhausted, keeping the graph");
                }
                Err(reason) => {
                    messages.push(Message::assistant(raw));
                    messages.push(Message::user(format!(
                        "The previous plan was rejected: {reason}. Reply again with a corrected plan or `no changes`."
                    )));
                }
            }
        }
        Ok(RefineOutcome {
            graph: graph.clone(),
            plan: RefinementPlan::default(),
            exchanges,
            degraded: true,
        })
    }
}
