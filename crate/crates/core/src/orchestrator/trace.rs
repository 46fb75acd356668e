//! Append-only run trace: one JSON event per line.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, Phase};
use super::RunEcho;
use crate::backend::BackendExchange;
use crate::collector::ExecutionRecord;
use crate::graph::{parse_graph, serialize_graph, FlowGraph, NodeId};
use crate::planner::ExpansionStep;
use crate::refiner::RefinementPlan;
use crate::summarizer::Conclusion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Success,
    Degraded,
    Aborted,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Degraded => 2,
            RunStatus::Aborted => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStarted {
        round: u32,
        run_id: String,
        config: RunEcho,
    },
    PlanStep {
        round: u32,
        step: ExpansionStep,
    },
    SequentialPlan {
        round: u32,
        graph: FlowGraph,
        exchanges: Vec<BackendExchange>,
    },
    RoundStarted {
        round: u32,
        frontier: Vec<NodeId>,
    },
    NodeExecuted {
        round: u32,
        record: ExecutionRecord,
    },
    Refined {
        round: u32,
        plan: RefinementPlan,
        exchanges: Vec<BackendExchange>,
        changed: bool,
        /// Repair budget ran out; the graph was kept.
        degraded: bool,
        /// Triggered by a blocked frontier rather than a finished round.
        stall: bool,
    },
    Snapshot {
        round: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        graph: Option<FlowGraph>,
    },
    Concluded {
        round: u32,
        conclusion: Conclusion,
        exchange: BackendExchange,
    },
    Aborted {
        round: u32,
        phase: String,
        error: String,
        exchanges: Vec<BackendExchange>,
    },
    RunResumed {
        round: u32,
        phase: Phase,
    },
    RunFinished {
        round: u32,
        status: RunStatus,
        exit_code: i32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        graph: FlowGraph,
        #[serde(with = "crate::time::millis")]
        elapsed: Duration,
    },
}

impl TraceEvent {
    pub fn round(&self) -> u32 {
        match self {
            TraceEvent::RunStarted { round, .. }
            | TraceEvent::PlanStep { round, .. }
            | TraceEvent::SequentialPlan { round, .. }
            | TraceEvent::RoundStarted { round, .. }
            | TraceEvent::NodeExecuted { round, .. }
            | TraceEvent::Refined { round, .. }
            | TraceEvent::Snapshot { round, .. }
            | TraceEvent::Concluded { round, .. }
            | TraceEvent::Aborted { round, .. }
            | TraceEvent::RunResumed { round, .. }
            | TraceEvent::RunFinished { round, .. } => *round,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no snapshot for round {round} (last round is {last})")]
    RoundOutOfRange { round: u32, last: u32 },
    #[error("snapshot {0} is not a valid graph: {1}")]
    BadSnapshot(String, String),
    #[error("the trace holds no planning steps")]
    NothingToExport,
}

/// Writes events to the trace file, flushing each line, and keeps them in memory.
pub(crate) struct Tracer {
    file: Option<File>,
    snapshot_dir: Option<PathBuf>,
    events: Vec<TraceEvent>,
}

impl Tracer {
    pub(crate) fn open(trace: Option<&Path>, snapshot_dir: Option<&Path>, append: bool) -> io::Result<Self> {
        let file = match trace {
            Some(path) => Some(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(path)?,
            ),
            None => None,
        };
        if let Some(dir) = snapshot_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Tracer {
            file,
            snapshot_dir: snapshot_dir.map(Path::to_path_buf),
            events: Vec::new(),
        })
    }

    pub(crate) fn emit(&mut self, event: TraceEvent) -> io::Result<()> {
        if let Some(file) = &mut self.file {
            let mut line = event.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub(crate) fn snapshot(&mut self, round: u32, graph: &FlowGraph) -> io::Result<()> {
        let event = match &self.snapshot_dir {
            Some(dir) => {
                let name = snapshot_file_name(round);
                std::fs::write(dir.join(&name), serialize_graph(graph))?;
                TraceEvent::Snapshot {
                    round,
                    file: Some(name),
                    graph: None,
                }
            }
            None => TraceEvent::Snapshot {
                round,
                file: None,
                graph: Some(graph.clone()),
            },
        };
        self.emit(event)
    }

    pub(crate) fn len(&self) -> usize {
        self.events.len()
    }

    pub(crate) fn finish(self, run_id: String, checkpoints: Vec<Checkpoint>) -> RunTrace {
        RunTrace {
            run_id,
            events: self.events,
            snapshot_dir: self.snapshot_dir,
            checkpoints,
        }
    }
}

pub fn snapshot_file_name(round: u32) -> String {
    format!("round-{round:03}.json")
}

/// A run's events plus what is needed to resolve snapshot files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunTrace {
    pub run_id: String,
    pub events: Vec<TraceEvent>,
    /// Directory holding snapshot files referenced by `file`.
    pub snapshot_dir: Option<PathBuf>,
    /// Every checkpoint taken during the run, in order.
    pub checkpoints: Vec<Checkpoint>,
}

impl RunTrace {
    pub fn parse_jsonl(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| TraceError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn load(path: &Path, snapshot_dir: Option<&Path>) -> Result<RunTrace, TraceError> {
        let events = Self::parse_jsonl(&std::fs::read_to_string(path)?)?;
        let run_id = events
            .iter()
            .find_map(|e| match e {
                TraceEvent::RunStarted { run_id, .. } => Some(run_id.clone()),
                _ => None,
            })
            .unwrap_or_default();
        Ok(RunTrace {
            run_id,
            events,
            snapshot_dir: snapshot_dir.map(Path::to_path_buf),
            checkpoints: Vec::new(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.events.iter().map(|e| e.to_line() + "\n").collect()
    }

    fn finished(&self) -> Option<&TraceEvent> {
        self.events
            .iter()
            .rev()
            .find(|e| matches!(e, TraceEvent::RunFinished { .. }))
    }

    pub fn status(&self) -> Option<RunStatus> {
        match self.finished()? {
            TraceEvent::RunFinished { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// Process exit code; an unfinished trace counts as aborted.
    pub fn exit_code(&self) -> i32 {
        self.status().unwrap_or(RunStatus::Aborted).exit_code()
    }

    pub fn reason(&self) -> Option<&str> {
        match self.finished()? {
            TraceEvent::RunFinished { reason, .. } => reason.as_deref(),
            _ => None,
        }
    }

    pub fn final_graph(&self) -> Option<&FlowGraph> {
        match self.finished()? {
            TraceEvent::RunFinished { graph, .. } => Some(graph),
            _ => None,
        }
    }

    pub fn conclusion(&self) -> Option<&Conclusion> {
        self.events.iter().rev().find_map(|e| match e {
            TraceEvent::Concluded { conclusion, .. } => Some(conclusion),
            _ => None,
        })
    }

    pub fn expansion_steps(&self) -> Vec<&ExpansionStep> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::PlanStep { step, .. } => Some(step),
                _ => None,
            })
            .collect()
    }

    /// Node ids executed in each collect round, in round order.
    pub fn collect_rounds(&self) -> Vec<Vec<NodeId>> {
        let mut rounds: Vec<Vec<NodeId>> = Vec::new();
        for event in &self.events {
            match event {
                TraceEvent::RoundStarted { .. } => rounds.push(Vec::new()),
                TraceEvent::NodeExecuted { record, .. } => {
                    if let Some(last) = rounds.last_mut() {
                        last.push(record.node_id.clone());
                    }
                }
                _ => {}
            }
        }
        rounds
    }

    pub fn execution_records(&self) -> Vec<&ExecutionRecord> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::NodeExecuted { record, .. } => Some(record),
                _ => None,
            })
            .collect()
    }

    /// Every backend exchange recorded anywhere in the trace, in event order.
    pub fn exchanges(&self) -> Vec<&BackendExchange> {
        let mut out = Vec::new();
        for event in &self.events {
            match event {
                TraceEvent::PlanStep { step, .. } => out.extend(&step.exchanges),
                TraceEvent::SequentialPlan { exchanges, .. }
                | TraceEvent::Refined { exchanges, .. }
                | TraceEvent::Aborted { exchanges, .. } => out.extend(exchanges),
                TraceEvent::NodeExecuted { record, .. } => out.extend(&record.exchanges),
                TraceEvent::Concluded { exchange, .. } => out.push(exchange),
                _ => {}
            }
        }
        out
    }

    pub fn snapshot_rounds(&self) -> Vec<u32> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Snapshot { round, .. } => Some(*round),
                _ => None,
            })
            .collect()
    }

    /// The graph recorded at the end of `round`; round 0 is the planned graph.
    pub fn snapshot(&self, round: u32) -> Result<FlowGraph, TraceError> {
        let event = self
            .events
            .iter()
            .rev()
            .find(|e| matches!(e, TraceEvent::Snapshot { round: r, .. } if *r == round));
        match event {
            Some(TraceEvent::Snapshot { graph: Some(g), .. }) => Ok(g.clone()),
            Some(TraceEvent::Snapshot { file: Some(name), .. }) => {
                let path = match &self.snapshot_dir {
                    Some(dir) => dir.join(name),
                    None => PathBuf::from(name),
                };
                let text = std::fs::read_to_string(&path)?;
                parse_graph(&text).map_err(|e| TraceError::BadSnapshot(path.display().to_string(), e.to_string()))
            }
            _ => Err(TraceError::RoundOutOfRange {
                round,
                last: self.snapshot_rounds().into_iter().max().unwrap_or(0),
            }),
        }
    }
}
