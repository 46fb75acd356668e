//! Property tests for graph serialization, scheduling order and the edit algebra.

mod common;

use std::collections::BTreeSet;

use common::*;
use knowflow::graph::{parse_graph, serialize_graph};
use knowflow::refiner::{apply_op, apply_plan, GraphOp, RefinementPlan};
use knowflow::{FlowGraph, NodeId, NodeState, TaskType};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dag(seed: u64, n: usize, density: f64) -> RawDag {
    random_dag(&mut ChaCha8Rng::seed_from_u64(seed), n, density)
}

fn relabel(graph: &FlowGraph, texts: &[String]) -> FlowGraph {
    graph
        .modify(|d| {
            for (node, text) in d.nodes.iter_mut().zip(texts.iter().cycle()) {
                node.description = format!("d{text}");
            }
            for (edge, text) in d.edges.iter_mut().zip(texts.iter().rev().cycle()) {
                edge.relation = text.clone();
            }
        })
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn serialization_round_trips(
        seed in any::<u64>(),
        n in 0usize..20,
        texts in prop::collection::vec("\\PC{0,12}", 1..6),
    ) {
        let graph = relabel(&dag(seed, n, 0.25).to_graph(), &texts);
        let text = serialize_graph(&graph);
        let back = parse_graph(&text).unwrap();
        prop_assert_eq!(&back, &graph);
        prop_assert_eq!(serialize_graph(&back), text);
    }

    #[test]
    fn layers_match_peeling(seed in any::<u64>(), n in 0usize..25, density in 0.0f64..0.5) {
        let raw = dag(seed, n, density);
        let graph = raw.to_graph();
        let got: Vec<BTreeSet<String>> = graph
            .topological_layers()
            .into_iter()
            .map(|l| l.into_iter().map(|id| id.to_string()).collect())
            .collect();
        prop_assert_eq!(got, raw.layers());
        let order = graph.topological_order();
        for e in graph.edges() {
            let pos = |id: &NodeId| order.iter().position(|x| x == id).unwrap();
            prop_assert!(pos(&e.from) < pos(&e.to));
        }
    }

    #[test]
    fn fresh_frontier_is_the_source_layer(seed in any::<u64>(), n in 0usize..25) {
        let raw = dag(seed, n, 0.2);
        let frontier: BTreeSet<String> = raw.to_graph().frontier().into_iter().map(|id| id.to_string()).collect();
        prop_assert_eq!(&frontier, &raw.layers()[0]);
    }

    #[test]
    fn add_then_delete_node_is_identity(seed in any::<u64>(), n in 0usize..15) {
        let graph = dag(seed, n, 0.3).to_graph();
        let added = apply_op(&graph, &GraphOp::AddNode {
            node_id: NodeId::from("fresh"),
            task_type: TaskType::Search,
            content: "extra".into(),
        }).unwrap();
        let back = apply_op(&added, &GraphOp::DelNode { node_id: NodeId::from("fresh") }).unwrap();
        prop_assert_eq!(back, graph);
    }

    #[test]
    fn add_then_delete_edge_is_identity(seed in any::<u64>(), n in 2usize..15, a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let graph = dag(seed, n, 0.3).to_graph();
        let ids: Vec<NodeId> = graph.nodes().iter().map(|n| n.id.clone()).collect();
        let (from, to) = (a.get(&ids).clone(), b.get(&ids).clone());
        let op = GraphOp::AddEdge { from: from.clone(), to: to.clone(), relationship: "r".into() };
        if let Ok(added) = apply_op(&graph, &op) {
            let back = apply_op(&added, &GraphOp::DelEdge { from, to }).unwrap();
            prop_assert_eq!(back, graph);
        }
    }

    #[test]
    fn rejected_plans_leave_no_trace(seed in any::<u64>(), n in 1usize..15) {
        let graph = dag(seed, n, 0.3).to_graph();
        let before = serialize_graph(&graph);
        let first = graph.nodes().iter().find(|n| n.id != QUERY).unwrap().id.clone();
        let plan = RefinementPlan {
            ops: vec![
                GraphOp::DelNode { node_id: first },
                GraphOp::DelNode { node_id: NodeId::from(QUERY) },
            ],
            rationale: None,
        };
        let err = apply_plan(&graph, &plan).unwrap_err();
        prop_assert_eq!(err.index, 1);
        prop_assert_eq!(serialize_graph(&graph), before);
    }

    #[test]
    fn rewording_a_finished_node_reopens_it(seed in any::<u64>(), n in 1usize..15) {
        let graph = dag(seed, n, 0.3).to_graph();
        let source = graph.frontier().into_iter().find(|id| id != QUERY).unwrap();
        let done = graph.with_outcome(source.as_str(), NodeState::Success, Some("known".into())).unwrap();
        let reworded = apply_op(&done, &GraphOp::ModNode {
            node_id: source.clone(),
            task_type: None,
            content: Some("new wording".into()),
        }).unwrap();
        let node = reworded.node(source.as_str()).unwrap();
        prop_assert_eq!(node.state, NodeState::Pending);
        prop_assert!(node.context.is_none());
        prop_assert!(oracle_valid(&reworded).is_ok());
    }
}
