use std::fmt::Write;

use super::{FlowGraph, NodeState};

fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for c in text.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn style(state: NodeState) -> &'static str {
    match state {
        NodeState::Pending => "style=dashed",
        NodeState::Running => "style=bold, color=blue",
        NodeState::Success => "style=filled, fillcolor=palegreen",
        NodeState::Failure => "style=filled, fillcolor=lightcoral",
    }
}

/// Graphviz rendering. One statement per node labeled `id: type`, one per edge
/// labeled with its relation (omitted when the relation is empty).
pub fn to_dot(graph: &FlowGraph) -> String {
    let mut out = String::from("digraph flow {\n  rankdir=LR;\n");
    for node in graph.nodes() {
        let label = format!("{}: {}", node.id, node.task_type);
        writeln!(
            out,
            "  {} [label={}, {}];",
            quote(node.id.as_str()),
            quote(&label),
            style(node.state)
        )
        .unwrap();
    }
    for edge in graph.edges() {
        write!(out, "  {} -> {}", quote(edge.from.as_str()), quote(edge.to.as_str())).unwrap();
        if edge.relation.is_empty() {
            out.push_str(";\n");
        } else {
            writeln!(out, " [label={}];", quote(&edge.relation)).unwrap();
        }
    }
    out.push_str("}\n");
    out
}
