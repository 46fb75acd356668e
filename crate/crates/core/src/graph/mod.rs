//! Knowledge-flow graph: typed subtask nodes joined by labeled dependency edges.
//!
//! A [`FlowGraph`] is always valid. It is acyclic, every edge resolves, and it has
//! exactly one `answer` node (the query node) which is a sink. Unvalidated
//! input lives in a [`GraphDraft`] until [`FlowGraph::try_from_draft`] accepts it.
//!
//! Nodes are kept sorted by id and edges by `(from, to)`, so derived equality
//! is structural equality and every traversal order is reproducible.

mod dot;
mod format;
mod validate;

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dot::to_dot;
pub use format::{parse_graph, serialize_graph};
pub use validate::{validate, ValidationReport, Violation};

/// Id given to the query node by [`FlowGraph::new`].
pub const QUERY_NODE_ID: &str = "task";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

impl PartialEq<str> for NodeId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for NodeId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Search,
    Solve,
    Answer,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Search => "search",
            TaskType::Solve => "solve",
            TaskType::Answer => "answer",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{token}`")]
pub struct UnknownToken {
    pub kind: &'static str,
    pub token: String,
}

impl FromStr for TaskType {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "search" => Ok(TaskType::Search),
            "solve" => Ok(TaskType::Solve),
            "answer" => Ok(TaskType::Answer),
            other => Err(UnknownToken {
                kind: "task type",
                token: other.to_owned(),
            }),
        }
    }
}

/// Execution state of a node.
///
/// `pending -> running -> {success, failure}`. Only `success` nodes carry a context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    #[default]
    Pending,
    Running,
    Success,
    Failure,
}

impl NodeState {
    pub fn is_terminal(self) -> bool {
        matches!(self, NodeState::Success | NodeState::Failure)
    }

    pub fn can_transition_to(self, next: NodeState) -> bool {
        matches!(
            (self, next),
            (NodeState::Pending, NodeState::Running)
                | (NodeState::Pending, NodeState::Success)
                | (NodeState::Pending, NodeState::Failure)
                | (NodeState::Running, NodeState::Success)
                | (NodeState::Running, NodeState::Failure)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Pending => "pending",
            NodeState::Running => "running",
            NodeState::Success => "success",
            NodeState::Failure => "failure",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeState {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(NodeState::Pending),
            "running" => Ok(NodeState::Running),
            "success" => Ok(NodeState::Success),
            "failure" => Ok(NodeState::Failure),
            other => Err(UnknownToken {
                kind: "node state",
                token: other.to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNode {
    pub id: NodeId,
    pub task_type: TaskType,
    pub description: String,
    pub state: NodeState,
    /// Distilled knowledge; present exactly when `state` is `success`.
    pub context: Option<String>,
}

impl FlowNode {
    /// A fresh pending node.
    pub fn pending(id: impl Into<NodeId>, task_type: TaskType, description: impl Into<String>) -> Self {
        FlowNode {
            id: id.into(),
            task_type,
            description: description.into(),
            state: NodeState::Pending,
            context: None,
        }
    }
}

/// Dependency edge: `from` provides knowledge to `to`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub relation: String,
}

impl FlowEdge {
    pub fn new(from: impl Into<NodeId>, to: impl Into<NodeId>, relation: impl Into<String>) -> Self {
        FlowEdge {
            from: from.into(),
            to: to.into(),
            relation: relation.into(),
        }
    }

    pub fn key(&self) -> (&NodeId, &NodeId) {
        (&self.from, &self.to)
    }
}

/// Unvalidated nodes and edges, freely mutable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphDraft {
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
}

impl GraphDraft {
    pub fn node_mut(&mut self, id: &str) -> Option<&mut FlowNode> {
        self.nodes.iter_mut().find(|n| n.id == *id)
    }

    pub fn contains_node(&self, id: &str) -> bool {
        self.nodes.iter().any(|n| n.id == *id)
    }

    pub fn edge_position(&self, from: &str, to: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.from == *from && e.to == *to)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("structurally invalid graph: {0}")]
    Structural(ValidationReport),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// A validated knowledge-flow DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowGraph {
    nodes: Vec<FlowNode>,
    edges: Vec<FlowEdge>,
    query: NodeId,
}

impl FlowGraph {
    /// The initial flow: one pending `answer` node holding the query.
    pub fn new(query: &str) -> Result<Self, GraphError> {
        if query.trim().is_empty() {
            return Err(GraphError::InvalidInput("query must not be empty".into()));
        }
        Ok(FlowGraph {
            nodes: vec![FlowNode::pending(QUERY_NODE_ID, TaskType::Answer, query)],
            edges: Vec::new(),
            query: NodeId::new(QUERY_NODE_ID),
        })
    }

    pub fn try_from_draft(mut draft: GraphDraft) -> Result<Self, GraphError> {
        let report = validate(&draft);
        if !report.is_ok() {
            return Err(GraphError::Structural(report));
        }
        draft.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        draft.edges.sort_by(|a, b| a.key().cmp(&b.key()));
        let query = draft
            .nodes
            .iter()
            .find(|n| n.task_type == TaskType::Answer)
            .map(|n| n.id.clone())
            .expect("validated graph has an answer node");
        Ok(FlowGraph {
            nodes: draft.nodes,
            edges: draft.edges,
            query,
        })
    }

    pub fn to_draft(&self) -> GraphDraft {
        GraphDraft {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }

    /// Copy into a draft, mutate it, and re-validate.
    pub fn modify<F>(&self, edit: F) -> Result<FlowGraph, GraphError>
    where
        F: FnOnce(&mut GraphDraft),
    {
        let mut draft = self.to_draft();
        edit(&mut draft);
        FlowGraph::try_from_draft(draft)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(&self.to_draft())
    }

    pub fn nodes(&self) -> &[FlowNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[FlowEdge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes
            .binary_search_by(|n| n.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&FlowEdge> {
        self.edges
            .binary_search_by(|e| (e.from.as_str(), e.to.as_str()).cmp(&(from, to)))
            .ok()
            .map(|i| &self.edges[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node(id).is_some()
    }

    pub fn query_node_id(&self) -> &NodeId {
        &self.query
    }

    pub fn query_node(&self) -> &FlowNode {
        self.node(self.query.as_str()).expect("query node exists")
    }

    /// Direct predecessors of `id`, in id order.
    pub fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a FlowNode> + 'a {
        self.edges
            .iter()
            .filter(move |e| e.to == *id)
            .filter_map(|e| self.node(e.from.as_str()))
    }

    /// Direct successors of `id`, in id order.
    pub fn successors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a FlowNode> + 'a {
        self.edges
            .iter()
            .filter(move |e| e.from == *id)
            .filter_map(|e| self.node(e.to.as_str()))
    }

    /// Pending nodes whose direct predecessors have all succeeded.
    pub fn frontier(&self) -> BTreeSet<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.state == NodeState::Pending)
            .filter(|n| self.predecessors(n.id.as_str()).all(|p| p.state == NodeState::Success))
            .map(|n| n.id.clone())
            .collect()
    }

    /// Layer `k` holds the nodes whose longest incoming chain has `k` edges.
    pub fn topological_layers(&self) -> Vec<Vec<NodeId>> {
        let mut indegree: BTreeMap<&str, usize> =
            self.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
        for e in &self.edges {
            *indegree.get_mut(e.to.as_str()).expect("validated endpoint") += 1;
        }
        let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ready: Vec<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        for id in &ready {
            depth.insert(id, 0);
        }
        while let Some(id) = ready.pop() {
            let level = depth[id];
            for e in self.edges.iter().filter(|e| e.from == *id) {
                let to = e.to.as_str();
                let d = depth.entry(to).or_insert(0);
                *d = (*d).max(level + 1);
                let deg = indegree.get_mut(to).expect("validated endpoint");
                *deg -= 1;
                if *deg == 0 {
                    ready.push(to);
                }
            }
        }
        let count = depth.values().copied().max().map_or(0, |m| m + 1);
        let mut layers = vec![Vec::new(); count];
        // BTreeMap iteration keeps every layer sorted by id.
        for (id, level) in depth {
            layers[level].push(NodeId::new(id));
        }
        layers
    }

    /// Node ids in layer order, ties broken by id.
    pub fn topological_order(&self) -> Vec<NodeId> {
        self.topological_layers().into_iter().flatten().collect()
    }

    /// Non-query nodes that are not yet terminal.
    pub fn open_work(&self) -> impl Iterator<Item = &FlowNode> {
        self.nodes
            .iter()
            .filter(|n| n.id != self.query && !n.state.is_terminal())
    }

    /// Copy of this graph with `id`'s state and context replaced.
    pub fn with_outcome(
        &self,
        id: &str,
        state: NodeState,
        context: Option<String>,
    ) -> Result<FlowGraph, GraphError> {
        let current = self
            .node(id)
            .ok_or_else(|| GraphError::InvalidInput(format!("unknown node `{id}`")))?;
        if !current.state.can_transition_to(state) {
            return Err(GraphError::InvalidInput(format!(
                "node `{id}` cannot move from {} to {state}",
                current.state
            )));
        }
        self.modify(|draft| {
            let node = draft.node_mut(id).expect("checked above");
            node.state = state;
            node.context = context;
        })
    }
}
