//! Planner dialogue records and DOT renderings of recorded rounds.

use serde::{Deserialize, Serialize};

use super::trace::{RunTrace, TraceError};
use crate::backend::Role;
use crate::graph::{serialize_graph, to_dot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueMessage {
    pub role: Role,
    pub content: String,
}

/// One single-turn planning exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub messages: Vec<DialogueMessage>,
}

/// One record per expansion step. The user turn is the request sent for
/// that step; the assistant turn is the accepted graph in canonical form, so
/// the closing fixpoint step answers with its own input graph.
pub fn export_planner_dialogue(trace: &RunTrace) -> Result<Vec<DialogueRecord>, TraceError> {
    let steps = trace.expansion_steps();
    if steps.is_empty() {
        return Err(TraceError::NothingToExport);
    }
    Ok(steps
        .into_iter()
        .map(|step| {
            let request = step
                .exchanges
                .first()
                .and_then(|ex| ex.messages.first())
                .map(|m| m.content.clone())
                .unwrap_or_default();
            DialogueRecord {
                messages: vec![
                    DialogueMessage {
                        role: Role::User,
                        content: request,
                    },
                    DialogueMessage {
                        role: Role::Assistant,
                        content: serialize_graph(&step.after),
                    },
                ],
            }
        })
        .collect())
}

pub fn dialogue_jsonl(records: &[DialogueRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("dialogue records serialize") + "\n")
        .collect()
}

/// DOT text of the graph recorded for `round`.
pub fn export_dot(trace: &RunTrace, round: u32) -> Result<String, TraceError> {
    Ok(to_dot(&trace.snapshot(round)?))
}
