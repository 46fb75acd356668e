//! Conclusion generation: the query node runs last.
//!
//! In `qa` mode only the query node's successful direct predecessors feed the
//! answer. In `report` mode every successful node does.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_with_retries, Backend, BackendError, BackendExchange, Message};
use crate::graph::{FlowGraph, GraphError, NodeId, NodeState, TaskType, UnknownToken};
use crate::prompts::Prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryMode {
    #[default]
    Qa,
    Report,
}

impl SummaryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SummaryMode::Qa => "qa",
            SummaryMode::Report => "report",
        }
    }
}

impl fmt::Display for SummaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SummaryMode {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qa" => Ok(SummaryMode::Qa),
            "report" => Ok(SummaryMode::Report),
            other => Err(UnknownToken {
                kind: "summary mode",
                token: other.to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerInput {
    pub node_id: NodeId,
    pub task_type: TaskType,
    pub description: String,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conclusion {
    pub answer: String,
    pub mode: SummaryMode,
    /// Nodes whose contexts were consumed, in input order.
    pub sources: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SummaryError {
    #[error("query node {0} is already concluded")]
    AlreadyConcluded(NodeId),
    /// The query node was marked failed; `graph` carries that state.
    #[error("conclusion backend failed: {source}")]
    Backend {
        source: BackendError,
        graph: Box<FlowGraph>,
        exchanges: Vec<BackendExchange>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Inputs for the conclusion, in topological-layer order then node id.
pub fn answer_inputs(graph: &FlowGraph, mode: SummaryMode) -> Result<Vec<AnswerInput>, SummaryError> {
    let query = graph.query_node();
    if query.state.is_terminal() {
        return Err(SummaryError::AlreadyConcluded(query.id.clone()));
    }
    let eligible = |id: &NodeId| -> bool {
        match mode {
            SummaryMode::Qa => graph.edge(id.as_str(), query.id.as_str()).is_some(),
            SummaryMode::Report => *id != query.id,
        }
    };
    Ok(graph
        .topological_order()
        .iter()
        .filter(|id| eligible(id))
        .filter_map(|id| graph.node(id.as_str()))
        .filter(|n| n.state == NodeState::Success)
        .map(|n| AnswerInput {
            node_id: n.id.clone(),
            task_type: n.task_type,
            description: n.description.clone(),
            context: n.context.clone().unwrap_or_default(),
        })
        .collect())
}

/// Descriptions of failed nodes the answer cannot rely on. In `qa` mode only
/// failed direct predecessors count.
fn unresolved(graph: &FlowGraph, mode: SummaryMode) -> Vec<(NodeId, String)> {
    let query = graph.query_node_id();
    graph
        .topological_order()
        .iter()
        .filter_map(|id| graph.node(id.as_str()))
        .filter(|n| n.state == NodeState::Failure)
        .filter(|n| mode == SummaryMode::Report || graph.edge(n.id.as_str(), query.as_str()).is_some())
        .map(|n| (n.id.clone(), n.description.clone()))
        .collect()
}

/// The conclusion request: objective, knowledge and unresolved items.
pub fn conclusion_messages(prompts: &Prompts, graph: &FlowGraph, mode: SummaryMode, inputs: &[AnswerInput]) -> Vec<Message> {
    let instruction = match mode {
        SummaryMode::Qa => &prompts.answer_qa,
        SummaryMode::Report => &prompts.answer_report,
    };
    let mut body = format!("Objective: {}\n\nKnowledge:", graph.query_node().description);
    if inputs.is_empty() {
        body.push_str(" none");
    }
    for input in inputs {
        body.push_str(&format!(
            "\n[{}] ({}) {}\n{}",
            input.node_id, input.task_type, input.description, input.context
        ));
    }
    let open = unresolved(graph, mode);
    if !open.is_empty() {
        body.push_str("\n\nUnresolved:");
        for (id, description) in open {
            body.push_str(&format!("\n[{id}] {description}"));
        }
    }
    vec![Message::system(instruction.clone()), Message::user(body)]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concluded {
    pub graph: FlowGraph,
    pub conclusion: Conclusion,
    pub exchange: BackendExchange,
}

pub struct Summarizer {
    backend: Arc<dyn Backend>,
    prompts: Arc<Prompts>,
    retries: u32,
}

impl Summarizer {
    pub fn new(backend: Arc<dyn Backend>, prompts: Arc<Prompts>) -> Self {
        Summarizer {
            backend,
            prompts,
            retries: 1,
        }
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    /// Execute the query node with one backend exchange.
    pub async fn conclude(&self, graph: &FlowGraph, mode: SummaryMode) -> Result<Concluded, SummaryError> {
        let inputs = answer_inputs(graph, mode)?;
        let messages = conclusion_messages(&self.prompts, graph, mode, &inputs);
        let query = graph.query_node_id().clone();
        let exchange = match complete_with_retries(self.backend.as_ref(), &messages, self.retries).await {
            Ok(ex) if !ex.response.trim().is_empty() => ex,
            Ok(ex) => {
                let failed = graph.with_outcome(query.as_str(), NodeState::Failure, None)?;
                return Err(SummaryError::Backend {
                    source: BackendError::Protocol("empty conclusion".into()),
                    graph: Box::new(failed),
                    exchanges: vec![ex],
                });
            }
            Err(source) => {
                let failed = graph.with_outcome(query.as_str(), NodeState::Failure, None)?;
                return Err(SummaryError::Backend {
                    source,
                    graph: Box::new(failed),
                    exchanges: Vec::new(),
                });
            }
        };
        let answer = exchange.response.trim().to_owned();
        let graph = graph.with_outcome(query.as_str(), NodeState::Success, Some(answer.clone()))?;
        Ok(Concluded {
            graph,
            conclusion: Conclusion {
                answer,
                mode,
                sources: inputs.into_iter().map(|i| i.node_id).collect(),
            },
            exchange,
        })
    }
}
