//! Resumable loop state, saved at every phase boundary.

use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::FlowGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreCollect,
    PreRefine,
    PreConclude,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::PreCollect => "pre_collect",
            Phase::PreRefine => "pre_refine",
            Phase::PreConclude => "pre_conclude",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub run_id: String,
    pub query: String,
    /// Collect rounds completed so far.
    pub round: u32,
    pub phase: Phase,
    /// Validated on load.
    pub graph: FlowGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_cursor: Option<serde_json::Value>,
    /// A stall refinement already ran since the last collect round.
    #[serde(default)]
    pub stalled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_reason: Option<String>,
    /// Trace events written before this checkpoint.
    pub events_emitted: usize,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn parse(text: &str) -> Result<Checkpoint, CheckpointError> {
        serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::parse(&std::fs::read_to_string(path)?)
    }

    /// Write via a sibling temp file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
