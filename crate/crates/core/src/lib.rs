//! Orchestration engine for research workflows expressed as a knowledge-flow DAG.
//!
//! A query becomes a graph of typed subtasks (`search`, `solve`, `answer`).
//! The [`planner`] grows that graph until the planning backend stops adding
//! nodes, the [`collector`] executes every dependency-satisfied node
//! concurrently, the [`refiner`] rewrites the graph between rounds, and the
//! [`summarizer`] executes the query node last. [`orchestrator`] ties the
//! loop together with traces, checkpoints and exports.

pub mod backend;
pub mod collector;
pub mod graph;
mod json;
pub mod orchestrator;
pub mod planner;
pub mod prompts;
pub mod refiner;
pub mod summarizer;
pub mod time;

pub use graph::{FlowEdge, FlowGraph, FlowNode, GraphDraft, GraphError, NodeId, NodeState, TaskType};
