//! Interchange format.
//!
//! ```json
//! {
//!   "nodes": [{"node_id": "n1", "task_type": "answer", "content": "..."}],
//!   "edges": [{"from": "n2", "to": "n1", "relationship": "..."}]
//! }
//! ```
//!
//! The persisted form adds `"state"` (omitted when pending) and `"context"`
//! (present only on successful nodes). Unknown fields are rejected.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{FlowEdge, FlowGraph, FlowNode, GraphDraft, GraphError, NodeState, TaskType};
use crate::json::{from_relaxed, JsonSyntaxError};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGraph {
    nodes: Vec<WireNode>,
    edges: Vec<WireEdge>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireNode {
    node_id: String,
    task_type: TaskType,
    content: String,
    #[serde(default, skip_serializing_if = "is_pending")]
    state: NodeState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEdge {
    from: String,
    to: String,
    relationship: String,
}

fn is_pending(state: &NodeState) -> bool {
    *state == NodeState::Pending
}

impl From<WireGraph> for GraphDraft {
    fn from(wire: WireGraph) -> Self {
        GraphDraft {
            nodes: wire
                .nodes
                .into_iter()
                .map(|n| FlowNode {
                    id: n.node_id.into(),
                    task_type: n.task_type,
                    description: n.content,
                    state: n.state,
                    context: n.context,
                })
                .collect(),
            edges: wire
                .edges
                .into_iter()
                .map(|e| FlowEdge::new(e.from, e.to, e.relationship))
                .collect(),
        }
    }
}

impl From<&FlowGraph> for WireGraph {
    fn from(graph: &FlowGraph) -> Self {
        WireGraph {
            nodes: graph
                .nodes()
                .iter()
                .map(|n| WireNode {
                    node_id: n.id.to_string(),
                    task_type: n.task_type,
                    content: n.description.clone(),
                    state: n.state,
                    context: n.context.clone(),
                })
                .collect(),
            edges: graph
                .edges()
                .iter()
                .map(|e| WireEdge {
                    from: e.from.to_string(),
                    to: e.to.to_string(),
                    relationship: e.relation.clone(),
                })
                .collect(),
        }
    }
}

impl Serialize for FlowGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireGraph::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FlowGraph {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireGraph::deserialize(deserializer)?;
        FlowGraph::try_from_draft(wire.into()).map_err(serde::de::Error::custom)
    }
}

/// Parse the interchange format. Tolerates code fences and trailing commas.
pub fn parse_graph(text: &str) -> Result<FlowGraph, GraphError> {
    let wire: WireGraph = from_relaxed(text).map_err(
        |JsonSyntaxError {
             line,
             column,
             message,
         }| GraphError::Parse {
            line,
            column,
            message,
        },
    )?;
    FlowGraph::try_from_draft(wire.into())
}

/// Canonical text: two-space indented JSON, nodes by id, edges by `(from, to)`.
pub fn serialize_graph(graph: &FlowGraph) -> String {
    serde_json::to_string_pretty(&WireGraph::from(graph)).expect("graph serialization is infallible")
}
