//! Default instruction texts for each backend role.
//!
//! Prompts are configuration: the engine only relies on the reply formats
//! described here, never on the exact wording. Override any field by loading
//! a JSON object with the same keys.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    pub planner: String,
    pub sequential_planner: String,
    pub executor: String,
    pub distill: String,
    pub refiner: String,
    pub answer_qa: String,
    pub answer_report: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts {
            planner: PLANNER.to_owned(),
            sequential_planner: SEQUENTIAL_PLANNER.to_owned(),
            executor: EXECUTOR.to_owned(),
            distill: DISTILL.to_owned(),
            refiner: REFINER.to_owned(),
            answer_qa: ANSWER_QA.to_owned(),
            answer_report: ANSWER_REPORT.to_owned(),
        }
    }
}

const PLANNER: &str = "\
Role: flow planner. The input is a task graph in JSON with \"nodes\" \
({\"node_id\", \"task_type\": search|solve|answer, \"content\"}) and \"edges\" \
({\"from\", \"to\", \"relationship\"}); an edge means `from` supplies knowledge to `to`. \
Grow the graph by one step: pick nodes that need to be broken down and add the \
subtasks they depend on, wiring every new edge to at least one new node. Keep every \
existing node and edge exactly as given. The single answer node must stay a sink. \
Reply with the complete graph as JSON only. When nothing more needs to be added, \
reply with the input graph unchanged.";

const SEQUENTIAL_PLANNER: &str = "\
Role: step planner. Break the objective below into an ordered list of steps that are \
executed one after another. Reply with JSON only: \
{\"steps\": [{\"task_type\": \"search\"|\"solve\", \"content\": \"...\"}]}.";

const EXECUTOR: &str = "\
Role: subtask executor. Resolve the task using the upstream knowledge provided and \
the tools listed below. Reply with exactly one JSON object per turn: \
{\"tool_call\": {\"name\": \"<tool>\", \"arguments\": \"<text>\"}} to call a tool, \
{\"final\": \"<result>\"} when the task is resolved, or \
{\"failure\": \"<reason>\"} when it cannot be resolved.";

const DISTILL: &str = "\
Role: knowledge distiller. Summarize what the trajectory below established for the \
task, keeping concrete facts, identifiers, numbers and URLs. Reply with the summary only.";

const REFINER: &str = "\
Role: flow refiner. The graph below includes execution states and the knowledge \
gathered so far. Decide whether its structure should change. Reply with JSON only: \
{\"ops\": [...], \"rationale\": \"...\"} where each op is one of \
{\"op\": \"AddNode\", \"node_id\", \"task_type\", \"content\"}, \
{\"op\": \"DelNode\", \"node_id\"}, \
{\"op\": \"ModNode\", \"node_id\", \"task_type\"?, \"content\"?}, \
{\"op\": \"AddEdge\", \"from\", \"to\", \"relationship\"}, \
{\"op\": \"DelEdge\", \"from\", \"to\"}, \
{\"op\": \"ModEdge\", \"from\", \"to\", \"relationship\"?, \"new_from\"?, \"new_to\"?}. \
Reply with `no changes` if the graph should stay as it is.";

const ANSWER_QA: &str = "\
Role: answerer. Answer the objective directly and concisely using the knowledge \
below. Mention unresolved items only if they affect the answer.";

const ANSWER_REPORT: &str = "\
Role: report writer. Write a complete, well-structured report for the objective \
using all of the knowledge below. Note gaps left by unresolved items.";
