use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{GraphDraft, NodeId, NodeState, TaskType};

/// One broken invariant, naming the nodes or edges involved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyNodeId { index: usize },
    EmptyDescription { node: NodeId },
    DuplicateNode { node: NodeId },
    ContextMismatch { node: NodeId, state: NodeState },
    SelfLoop { node: NodeId },
    DanglingEndpoint { from: NodeId, to: NodeId, missing: NodeId },
    DuplicateEdge { from: NodeId, to: NodeId },
    Cycle { nodes: Vec<NodeId> },
    MissingQueryNode,
    MultipleAnswerNodes { nodes: Vec<NodeId> },
    QueryNodeNotSink { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyNodeId { index } => write!(f, "node #{index} has an empty id"),
            Violation::EmptyDescription { node } => write!(f, "node {node} has an empty description"),
            Violation::DuplicateNode { node } => write!(f, "duplicate node id {node}"),
            Violation::ContextMismatch { node, state } => {
                write!(f, "node {node} in state {state} has mismatched context")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop on {node}"),
            Violation::DanglingEndpoint { from, to, missing } => {
                write!(f, "edge {from}->{to} has dangling endpoint {missing}")
            }
            Violation::DuplicateEdge { from, to } => write!(f, "duplicate edge {from}->{to}"),
            Violation::Cycle { nodes } => {
                let names: Vec<_> = nodes.iter().map(NodeId::as_str).collect();
                write!(f, "cycle {{{}}}", names.join(", "))
            }
            Violation::MissingQueryNode => f.write_str("no answer-type query node"),
            Violation::MultipleAnswerNodes { nodes } => {
                let names: Vec<_> = nodes.iter().map(NodeId::as_str).collect();
                write!(f, "more than one answer node: {}", names.join(", "))
            }
            Violation::QueryNodeNotSink { node } => {
                write!(f, "query node {node} has outgoing edges")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. } | Violation::SelfLoop { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Check every structural invariant of a draft and list all violations.
pub fn validate(draft: &GraphDraft) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();

    for (index, node) in draft.nodes.iter().enumerate() {
        if node.id.as_str().is_empty() {
            violations.push(Violation::EmptyNodeId { index });
        } else if !seen.insert(node.id.as_str()) {
            violations.push(Violation::DuplicateNode { node: node.id.clone() });
        }
        if node.description.trim().is_empty() {
            violations.push(Violation::EmptyDescription { node: node.id.clone() });
        }
        let context_ok = match node.state {
            NodeState::Success => node.context.as_deref().is_some_and(|c| !c.is_empty()),
            _ => node.context.is_none(),
        };
        if !context_ok {
            violations.push(Violation::ContextMismatch {
                node: node.id.clone(),
                state: node.state,
            });
        }
    }

    let mut adjacency: BTreeMap<&str, Vec<&str>> = seen.iter().map(|id| (*id, Vec::new())).collect();
    let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for edge in &draft.edges {
        let (from, to) = (edge.from.as_str(), edge.to.as_str());
        if from == to {
            violations.push(Violation::SelfLoop { node: edge.from.clone() });
            continue;
        }
        let mut dangling = false;
        for end in [&edge.from, &edge.to] {
            if !seen.contains(end.as_str()) {
                dangling = true;
                violations.push(Violation::DanglingEndpoint {
                    from: edge.from.clone(),
                    to: edge.to.clone(),
                    missing: end.clone(),
                });
            }
        }
        if !pairs.insert((from, to)) {
            violations.push(Violation::DuplicateEdge {
                from: edge.from.clone(),
                to: edge.to.clone(),
            });
            continue;
        }
        if !dangling {
            adjacency.get_mut(from).expect("known node").push(to);
        }
    }

    let answers: Vec<&NodeId> = draft
        .nodes
        .iter()
        .filter(|n| n.task_type == TaskType::Answer)
        .map(|n| &n.id)
        .collect();
    match answers.as_slice() {
        [] => violations.push(Violation::MissingQueryNode),
        [query] => {
            if draft.edges.iter().any(|e| e.from == **query) {
                violations.push(Violation::QueryNodeNotSink { node: (*query).clone() });
            }
        }
        many => violations.push(Violation::MultipleAnswerNodes {
            nodes: many.iter().map(|id| (*id).clone()).collect(),
        }),
    }

    for cycle in find_cycles(&adjacency) {
        violations.push(Violation::Cycle { nodes: cycle });
    }

    ValidationReport { violations }
}

/// Depth-first search; every back edge yields the cycle it closes.
fn find_cycles(adjacency: &BTreeMap<&str, Vec<&str>>) -> Vec<Vec<NodeId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Unvisited,
        OnStack,
        Done,
    }

    let mut marks: BTreeMap<&str, Mark> = adjacency.keys().map(|k| (*k, Mark::Unvisited)).collect();
    let mut cycles: Vec<Vec<NodeId>> = Vec::new();
    let mut reported: BTreeSet<Vec<NodeId>> = BTreeSet::new();

    for &root in adjacency.keys() {
        if marks[root] != Mark::Unvisited {
            continue;
        }
        // (node, index of next child to visit)
        let mut stack: Vec<(&str, usize)> = vec![(root, 0)];
        marks.insert(root, Mark::OnStack);
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let children = &adjacency[node];
            if *next < children.len() {
                let child = children[*next];
                *next += 1;
                match marks[child] {
                    Mark::Unvisited => {
                        marks.insert(child, Mark::OnStack);
                        stack.push((child, 0));
                    }
                    Mark::OnStack => {
                        let start = stack.iter().position(|(n, _)| *n == child).expect("on stack");
                        let mut members: Vec<NodeId> =
                            stack[start..].iter().map(|(n, _)| NodeId::new(*n)).collect();
                        members.sort();
                        if reported.insert(members.clone()) {
                            cycles.push(members);
                        }
                    }
                    Mark::Done => {}
                }
            } else {
                marks.insert(node, Mark::Done);
                stack.pop();
            }
        }
    }
    cycles
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::minimal;
    use crate::graph::{FlowEdge, FlowNode};

    #[test]
    fn minimal_graph_is_ok() {
        assert!(validate(&minimal().to_draft()).is_ok());
    }

    #[test]
    fn two_cycle_is_reported() {
        let mut draft = minimal().to_draft();
        draft.edges.push(FlowEdge::new("n1", "n2", "back"));
        let report = validate(&draft);
        assert!(report.violations.contains(&Violation::Cycle {
            nodes: vec!["n1".into(), "n2".into()]
        }));
        // n1 is also no longer a sink.
        assert!(report
            .violations
            .contains(&Violation::QueryNodeNotSink { node: "n1".into() }));
    }

    #[test]
    fn dangling_endpoint_is_reported() {
        let mut draft = minimal().to_draft();
        draft.edges.push(FlowEdge::new("n9", "n1", "ghost"));
        let report = validate(&draft);
        assert_eq!(
            report.violations,
            vec![Violation::DanglingEndpoint {
                from: "n9".into(),
                to: "n1".into(),
                missing: "n9".into()
            }]
        );
    }

    #[test]
    fn duplicate_edges_and_nodes() {
        let mut draft = minimal().to_draft();
        draft.edges.push(FlowEdge::new("n2", "n1", "again"));
        draft.nodes.push(FlowNode::pending("n3", TaskType::Search, "dup"));
        let report = validate(&draft);
        assert!(report.violations.contains(&Violation::DuplicateEdge {
            from: "n2".into(),
            to: "n1".into()
        }));
        assert!(report
            .violations
            .contains(&Violation::DuplicateNode { node: "n3".into() }));
    }

    #[test]
    fn answer_node_rules() {
        let mut draft = minimal().to_draft();
        draft.nodes.push(FlowNode::pending("n4", TaskType::Answer, "second"));
        assert!(matches!(
            validate(&draft).violations.as_slice(),
            [Violation::MultipleAnswerNodes { .. }]
        ));
        let draft = GraphDraft {
            nodes: vec![FlowNode::pending("a", TaskType::Search, "x")],
            edges: vec![],
        };
        assert_eq!(validate(&draft).violations, vec![Violation::MissingQueryNode]);
    }

    #[test]
    fn context_state_coupling() {
        let mut draft = minimal().to_draft();
        draft.nodes[1].context = Some("stray".into());
        draft.nodes[2].state = NodeState::Success;
        let report = validate(&draft);
        assert_eq!(report.violations.len(), 2);
        assert!(report
            .violations
            .iter()
            .all(|v| matches!(v, Violation::ContextMismatch { .. })));
    }

    #[test]
    fn self_loop_and_empty_fields() {
        let mut draft = minimal().to_draft();
        draft.edges.push(FlowEdge::new("n2", "n2", "me"));
        draft.nodes[2].description = " ".into();
        draft.nodes.push(FlowNode::pending("", TaskType::Search, "anon"));
        let report = validate(&draft);
        assert!(report.has_cycle());
        assert!(report
            .violations
            .contains(&Violation::EmptyDescription { node: "n3".into() }));
        assert!(report.violations.contains(&Violation::EmptyNodeId { index: 3 }));
    }
}
