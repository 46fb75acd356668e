//! Helpers shared by the integration tests and the acceptance suite.
//!
//! The DAG generator and structural checks here work on plain id/edge lists
//! so they can serve as oracles independent of `FlowGraph`.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use knowflow::backend::{Backend, BackendError, BackendExchange, Message, ScriptedBackend};
use knowflow::orchestrator::{Engine, RunConfig};
use knowflow::time::FrozenClock;
use knowflow::{FlowEdge, FlowGraph, FlowNode, GraphDraft, NodeState, TaskType};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_query(name: &str) -> String {
    std::fs::read_to_string(fixture(&format!("{name}.query")))
        .unwrap()
        .trim()
        .to_owned()
}

pub fn scripted(name: &str) -> Arc<ScriptedBackend> {
    let scenario = knowflow::backend::load_scenario(&fixture(&format!("{name}.json"))).unwrap();
    Arc::new(ScriptedBackend::new(scenario))
}

/// Engine over a fixture scenario with its mock tools and a frozen clock.
pub fn fixture_engine(name: &str) -> Engine {
    let backend = scripted(name);
    let tools = backend.scenario().tool_catalog();
    Engine::new(backend, tools).with_clock(Arc::new(FrozenClock))
}

pub fn fixture_config(name: &str) -> RunConfig {
    RunConfig::new(fixture_query(name))
}

/// Backend answering with a plain function of the request; logs requests.
pub struct FnBackend<F> {
    respond: F,
    log: Mutex<Vec<Vec<Message>>>,
}

impl<F> FnBackend<F>
where
    F: Fn(&[Message]) -> String + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        FnBackend {
            respond,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<Vec<Message>> {
        self.log.lock().unwrap().clone()
    }
}

#[async_trait]
impl<F> Backend for FnBackend<F>
where
    F: Fn(&[Message]) -> String + Send + Sync,
{
    async fn complete(&self, messages: &[Message]) -> Result<BackendExchange, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyRequest);
        }
        self.log.lock().unwrap().push(messages.to_vec());
        let response = (self.respond)(messages);
        Ok(BackendExchange::new(messages.to_vec(), response, Duration::ZERO))
    }
}

/// A DAG as plain lists: `order` is a topological order of the non-query
/// nodes, the query node is `"task"`.
#[derive(Debug, Clone)]
pub struct RawDag {
    pub nodes: Vec<(String, TaskType)>,
    pub edges: Vec<(String, String)>,
}

pub const QUERY: &str = "task";

/// Random DAG with `n` non-query nodes. Edges only go forward in a random
/// order, so it is acyclic by construction; every sink feeds the query node.
pub fn random_dag(rng: &mut ChaCha8Rng, n: usize, density: f64) -> RawDag {
    let mut ids: Vec<String> = (0..n).map(|i| format!("v{i:02}")).collect();
    ids.shuffle(rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(density) {
                edges.push((ids[i].clone(), ids[j].clone()));
            }
        }
    }
    let has_out: BTreeSet<&String> = edges.iter().map(|(a, _)| a).collect();
    let mut to_query: Vec<(String, String)> = ids
        .iter()
        .filter(|id| !has_out.contains(id) || rng.random_bool(0.1))
        .map(|id| (id.clone(), QUERY.to_owned()))
        .collect();
    edges.append(&mut to_query);
    let mut nodes: Vec<(String, TaskType)> = ids
        .iter()
        .map(|id| {
            let t = if rng.random_bool(0.5) { TaskType::Search } else { TaskType::Solve };
            (id.clone(), t)
        })
        .collect();
    nodes.push((QUERY.to_owned(), TaskType::Answer));
    RawDag { nodes, edges }
}

impl RawDag {
    pub fn to_graph(&self) -> FlowGraph {
        FlowGraph::try_from_draft(GraphDraft {
            nodes: self
                .nodes
                .iter()
                .map(|(id, t)| FlowNode::pending(id.as_str(), *t, format!("work for {id}")))
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|(a, b)| FlowEdge::new(a.as_str(), b.as_str(), format!("{a} feeds {b}")))
                .collect(),
        })
        .expect("generated DAG is valid")
    }

    pub fn predecessors(&self, id: &str) -> BTreeSet<String> {
        self.edges
            .iter()
            .filter(|(_, b)| b == id)
            .map(|(a, _)| a.clone())
            .collect()
    }

    /// Longest-path layers by repeated peeling of zero-indegree nodes.
    pub fn layers(&self) -> Vec<BTreeSet<String>> {
        let mut remaining: BTreeSet<String> = self.nodes.iter().map(|(id, _)| id.clone()).collect();
        let mut layers = Vec::new();
        while !remaining.is_empty() {
            let layer: BTreeSet<String> = remaining
                .iter()
                .filter(|id| {
                    !self
                        .edges
                        .iter()
                        .any(|(a, b)| b == *id && remaining.contains(a))
                })
                .cloned()
                .collect();
            assert!(!layer.is_empty(), "cycle in generated DAG");
            for id in &layer {
                remaining.remove(id);
            }
            layers.push(layer);
        }
        layers
    }
}

/// Independent structural check over a graph's node and edge lists.
pub fn oracle_valid(graph: &FlowGraph) -> Result<(), String> {
    let ids: BTreeMap<&str, &FlowNode> = graph.nodes().iter().map(|n| (n.id.as_str(), n)).collect();
    if ids.len() != graph.nodes().len() {
        return Err("duplicate node ids".into());
    }
    let answers: Vec<&&FlowNode> = ids.values().filter(|n| n.task_type == TaskType::Answer).collect();
    if answers.len() != 1 {
        return Err(format!("{} answer nodes", answers.len()));
    }
    let query = answers[0].id.as_str();
    let mut pairs = BTreeSet::new();
    for e in graph.edges() {
        if !ids.contains_key(e.from.as_str()) || !ids.contains_key(e.to.as_str()) {
            return Err(format!("dangling edge {}->{}", e.from, e.to));
        }
        if e.from == e.to {
            return Err("self loop".into());
        }
        if e.from == *query {
            return Err("query node has an outgoing edge".into());
        }
        if !pairs.insert((e.from.as_str(), e.to.as_str())) {
            return Err("duplicate edge".into());
        }
    }
    for n in ids.values() {
        let has_ctx = n.context.as_deref().is_some_and(|c| !c.is_empty());
        if (n.state == NodeState::Success) != has_ctx {
            return Err(format!("context mismatch on {}", n.id));
        }
    }
    // Kahn peel.
    let mut indegree: BTreeMap<&str, usize> = ids.keys().map(|k| (*k, 0)).collect();
    for (_, b) in &pairs {
        *indegree.get_mut(b).unwrap() += 1;
    }
    let mut ready: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut seen = 0;
    while let Some(id) = ready.pop() {
        seen += 1;
        for (a, b) in &pairs {
            if *a == id {
                let d = indegree.get_mut(b).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(b);
                }
            }
        }
    }
    if seen != ids.len() {
        return Err("cycle".into());
    }
    Ok(())
}

/// The description of the node a request is about, read from its `Task:` line.
pub fn task_line(messages: &[Message]) -> Option<String> {
    messages
        .iter()
        .find_map(|m| m.content.lines().find_map(|l| l.strip_prefix("Task: ")).map(str::to_owned))
}

/// Node id from a `work for <id>` description.
pub fn task_id(messages: &[Message]) -> Option<String> {
    task_line(messages).and_then(|t| t.strip_prefix("work for ").map(str::to_owned))
}

pub fn starts_with_role(messages: &[Message], prefix: &str) -> bool {
    messages.first().is_some_and(|m| m.content.starts_with(prefix))
}
