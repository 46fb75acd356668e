//! End-to-end run loop.
//!
//! `plan → (collect round → refine)* → conclude`, with an append-only
//! event trace, per-round graph snapshots and a checkpoint at every phase
//! boundary. The loop stops collecting once every non-query node is
//! terminal and the query node is executable, when the frontier is blocked
//! by failures, or when the round budget runs out.

mod checkpoint;
mod export;
mod trace;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, Phase};
pub use export::{dialogue_jsonl, export_dot, export_planner_dialogue, DialogueMessage, DialogueRecord};
pub use trace::{snapshot_file_name, RunStatus, RunTrace, TraceError, TraceEvent};

use crate::backend::{fingerprint, Backend, BackendError, Message, ToolCatalog, ToolKind};
use crate::collector::{Collector, ExecutorConfig};
use crate::graph::{FlowGraph, NodeId};
use crate::planner::{Planner, PlannerConfig, PlannerMode};
use crate::prompts::Prompts;
use crate::refiner::{RefineError, Refiner, RefinerConfig};
use crate::summarizer::{SummaryError, SummaryMode, Summarizer};
use crate::time::{Clock, SystemClock};
use trace::Tracer;

/// Where a run writes its artifacts. None of these affect trace contents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutputPaths {
    pub trace: Option<PathBuf>,
    pub snapshots: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub query: String,
    pub mode: SummaryMode,
    pub planner: PlannerConfig,
    pub refinement_enabled: bool,
    pub max_rounds: u32,
    pub executor: ExecutorConfig,
    pub refiner: RefinerConfig,
    pub outputs: OutputPaths,
}

impl RunConfig {
    pub fn new(query: impl Into<String>) -> Self {
        RunConfig {
            query: query.into(),
            mode: SummaryMode::Qa,
            planner: PlannerConfig::default(),
            refinement_enabled: true,
            max_rounds: 12,
            executor: ExecutorConfig::default(),
            refiner: RefinerConfig::default(),
            outputs: OutputPaths::default(),
        }
    }

    pub fn check(&self) -> Result<(), RunError> {
        if self.query.trim().is_empty() {
            return Err(RunError::InvalidConfig("query must not be empty".into()));
        }
        if self.max_rounds == 0 {
            return Err(RunError::InvalidConfig("max_rounds must be at least 1".into()));
        }
        self.executor
            .check()
            .map_err(|e| RunError::InvalidConfig(e.to_string()))?;
        self.planner
            .check()
            .map_err(|e| RunError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// The configuration as echoed into the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEcho {
    pub query: String,
    pub mode: SummaryMode,
    pub planner_mode: PlannerMode,
    pub refinement_enabled: bool,
    pub max_rounds: u32,
    pub executor: ExecutorConfig,
    pub planner: PlannerConfig,
    pub refiner: RefinerConfig,
    pub tools: BTreeMap<String, ToolKind>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match this run: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot restore backend state: {0}")]
    Cursor(BackendError),
    #[error("cannot write run output: {0}")]
    Io(#[from] std::io::Error),
}

/// Stable run id derived from the query.
pub fn run_id(query: &str) -> String {
    fingerprint(&[Message::user(query)])[..12].to_owned()
}

/// Every non-query node is terminal and the query node can run.
pub fn is_resolved(graph: &FlowGraph) -> bool {
    graph.open_work().next().is_none() && graph.frontier().contains(graph.query_node_id())
}

struct LoopState {
    round: u32,
    phase: Phase,
    graph: FlowGraph,
    stalled: bool,
    degraded: Option<String>,
}

struct Session<'a> {
    engine: &'a Engine,
    config: &'a RunConfig,
    run_id: String,
    tracer: Tracer,
    checkpoints: Vec<Checkpoint>,
}

impl Session<'_> {
    fn checkpoint(&mut self, state: &LoopState) -> Result<(), RunError> {
        let cp = Checkpoint {
            run_id: self.run_id.clone(),
            query: self.config.query.clone(),
            round: state.round,
            phase: state.phase,
            graph: state.graph.clone(),
            backend_cursor: self.engine.backend.cursor(),
            stalled: state.stalled,
            degraded_reason: state.degraded.clone(),
            events_emitted: self.tracer.len(),
        };
        if let Some(path) = &self.config.outputs.checkpoint {
            cp.save(path)?;
        }
        self.checkpoints.push(cp);
        Ok(())
    }

    fn finish(mut self, round: u32, status: RunStatus, reason: Option<String>, graph: FlowGraph) -> Result<RunTrace, RunError> {
        self.tracer.emit(TraceEvent::RunFinished {
            round,
            status,
            exit_code: status.exit_code(),
            reason,
            graph,
            elapsed: self.engine.clock.since(self.engine.started),
        })?;
        Ok(self.tracer.finish(self.run_id, self.checkpoints))
    }

    fn abort(
        mut self,
        state: LoopState,
        error: String,
        exchanges: Vec<crate::backend::BackendExchange>,
    ) -> Result<RunTrace, RunError> {
        tracing::error!(round = state.round, phase = %state.phase, %error, "run aborted");
        self.tracer.emit(TraceEvent::Aborted {
            round: state.round,
            phase: state.phase.to_string(),
            error: error.clone(),
            exchanges,
        })?;
        self.finish(state.round, RunStatus::Aborted, Some(error), state.graph)
    }

    async fn drive(mut self, mut state: LoopState) -> Result<RunTrace, RunError> {
        let engine = self.engine;
        let config = self.config;
        let collector = Collector::new(
            Arc::clone(&engine.backend),
            engine.tools.clone(),
            config.executor.clone(),
            Arc::clone(&engine.prompts),
        )
        .with_clock(Arc::clone(&engine.clock));
        let refiner = Refiner::new(
            Arc::clone(&engine.backend),
            config.refiner.clone(),
            Arc::clone(&engine.prompts),
        );
        loop {
            match state.phase {
                Phase::PreCollect => {
                    self.checkpoint(&state)?;
                    if is_resolved(&state.graph) {
                        state.phase = Phase::PreConclude;
                        continue;
                    }
                    let executable = Collector::executable(&state.graph);
                    if executable.is_empty() {
                        if config.refinement_enabled && !state.stalled {
                            state.stalled = true;
                            let out = match refiner.refine(&state.graph).await {
                                Ok(out) => out,
                                Err(e) => {
                                    let exchanges = refine_exchanges(&e);
                                    return self.abort(state, e.to_string(), exchanges);
                                }
                            };
                            let changed = out.graph != state.graph;
                            self.tracer.emit(TraceEvent::Refined {
                                round: state.round,
                                plan: out.plan,
                                exchanges: out.exchanges,
                                changed,
                                degraded: out.degraded,
                                stall: true,
                            })?;
                            if changed {
                                state.graph = out.graph;
                                continue;
                            }
                        }
                        state.degraded = Some(blocked_reason(&state.graph));
                        state.phase = Phase::PreConclude;
                        continue;
                    }
                    if state.round >= config.max_rounds {
                        state.degraded = Some(format!(
                            "round budget of {} exhausted with open work",
                            config.max_rounds
                        ));
                        state.phase = Phase::PreConclude;
                        continue;
                    }
                    state.round += 1;
                    self.tracer.emit(TraceEvent::RoundStarted {
                        round: state.round,
                        frontier: executable,
                    })?;
                    let (graph, records) = match collector.collect_round(&state.graph).await {
                        Ok(out) => out,
                        Err(e) => return self.abort(state, e.to_string(), Vec::new()),
                    };
                    for record in records {
                        self.tracer.emit(TraceEvent::NodeExecuted {
                            round: state.round,
                            record,
                        })?;
                    }
                    state.graph = graph;
                    state.stalled = false;
                    state.phase = Phase::PreRefine;
                }
                Phase::PreRefine => {
                    self.checkpoint(&state)?;
                    if config.refinement_enabled {
                        let out = match refiner.refine(&state.graph).await {
                            Ok(out) => out,
                            Err(e) => {
                                let exchanges = refine_exchanges(&e);
                                return self.abort(state, e.to_string(), exchanges);
                            }
                        };
                        let changed = out.graph != state.graph;
                        self.tracer.emit(TraceEvent::Refined {
                            round: state.round,
                            plan: out.plan,
                            exchanges: out.exchanges,
                            changed,
                            degraded: out.degraded,
                            stall: false,
                        })?;
                        state.graph = out.graph;
                    }
                    self.tracer.snapshot(state.round, &state.graph)?;
                    state.phase = Phase::PreCollect;
                }
                Phase::PreConclude => {
                    self.checkpoint(&state)?;
                    let summarizer = Summarizer::new(Arc::clone(&engine.backend), Arc::clone(&engine.prompts))
                        .with_retries(config.executor.retries);
                    return match summarizer.conclude(&state.graph, config.mode).await {
                        Ok(done) => {
                            if config.mode == SummaryMode::Report {
                                if let Some(path) = &config.outputs.report {
                                    std::fs::write(path, &done.conclusion.answer)?;
                                }
                            }
                            self.tracer.emit(TraceEvent::Concluded {
                                round: state.round,
                                conclusion: done.conclusion,
                                exchange: done.exchange,
                            })?;
                            let status = match state.degraded {
                                None => RunStatus::Success,
                                Some(_) => RunStatus::Degraded,
                            };
                            self.finish(state.round, status, state.degraded, done.graph)
                        }
                        Err(SummaryError::Backend {
                            source,
                            graph,
                            exchanges,
                        }) => {
                            state.graph = *graph;
                            self.abort(state, format!("conclusion failed: {source}"), exchanges)
                        }
                        Err(e) => self.abort(state, e.to_string(), Vec::new()),
                    };
                }
            }
        }
    }
}

fn refine_exchanges(e: &RefineError) -> Vec<crate::backend::BackendExchange> {
    match e {
        RefineError::Backend { exchanges, .. } => exchanges.clone(),
        RefineError::InvalidInput(_) => Vec::new(),
    }
}

fn blocked_reason(graph: &FlowGraph) -> String {
    let failed: Vec<&NodeId> = graph
        .nodes()
        .iter()
        .filter(|n| n.state == crate::graph::NodeState::Failure)
        .map(|n| &n.id)
        .collect();
    let names: Vec<&str> = failed.iter().map(|id| id.as_str()).collect();
    format!("frontier blocked by failed nodes: {}", names.join(", "))
}

/// Shared services for runs: one backend for every role plus the tool catalog.
pub struct Engine {
    backend: Arc<dyn Backend>,
    tools: ToolCatalog,
    prompts: Arc<Prompts>,
    clock: Arc<dyn Clock>,
    started: std::time::Duration,
}

impl Engine {
    pub fn new(backend: Arc<dyn Backend>, tools: ToolCatalog) -> Self {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
        Engine {
            backend,
            tools,
            prompts: Arc::new(Prompts::default()),
            started: clock.now(),
            clock,
        }
    }

    pub fn with_prompts(mut self, prompts: Prompts) -> Self {
        self.prompts = Arc::new(prompts);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.started = clock.now();
        self.clock = clock;
        self
    }

    pub fn prompts(&self) -> &Prompts {
        &self.prompts
    }

    fn echo(&self, config: &RunConfig) -> RunEcho {
        RunEcho {
            query: config.query.clone(),
            mode: config.mode,
            planner_mode: config.planner.mode,
            refinement_enabled: config.refinement_enabled,
            max_rounds: config.max_rounds,
            executor: config.executor.clone(),
            planner: config.planner.clone(),
            refiner: config.refiner.clone(),
            tools: self.tools.availability().into_iter().collect(),
        }
    }

    fn session<'a>(&'a self, config: &'a RunConfig, run_id: String, append: bool) -> Result<Session<'a>, RunError> {
        let tracer = Tracer::open(
            config.outputs.trace.as_deref(),
            config.outputs.snapshots.as_deref(),
            append,
        )?;
        Ok(Session {
            engine: self,
            config,
            run_id,
            tracer,
            checkpoints: Vec::new(),
        })
    }

    /// Plan, iterate collect/refine rounds, then conclude.
    ///
    /// Failures inside the run (planner output rejected, backend down during
    /// conclusion) produce an aborted trace, not an `Err`.
    pub async fn run(&self, config: &RunConfig) -> Result<RunTrace, RunError> {
        config.check()?;
        let id = run_id(&config.query);
        let mut session = self.session(config, id.clone(), false)?;
        session.tracer.emit(TraceEvent::RunStarted {
            round: 0,
            run_id: id,
            config: self.echo(config),
        })?;
        let planner = Planner::new(
            Arc::clone(&self.backend),
            config.planner.clone(),
            Arc::clone(&self.prompts),
        );
        let graph = match config.planner.mode {
            PlannerMode::Flow => match planner.plan(&config.query).await {
                Ok(outcome) => {
                    for step in outcome.steps {
                        session.tracer.emit(TraceEvent::PlanStep { round: 0, step })?;
                    }
                    if !outcome.reached_fixpoint {
                        tracing::warn!("planning stopped at the iteration cap before a fixpoint");
                    }
                    outcome.graph
                }
                Err(failure) => {
                    let last = failure.steps.last().map(|s| s.after.clone());
                    for step in failure.steps {
                        session.tracer.emit(TraceEvent::PlanStep { round: 0, step })?;
                    }
                    let graph = match last {
                        Some(g) => g,
                        None => FlowGraph::new(&config.query).map_err(|e| RunError::InvalidConfig(e.to_string()))?,
                    };
                    let state = initial_state(graph);
                    let exchanges = failure.error.exchanges().to_vec();
                    return session.abort(state, format!("planning failed: {}", failure.error), exchanges);
                }
            },
            PlannerMode::Sequential => match planner.plan_sequential(&config.query).await {
                Ok(plan) => {
                    session.tracer.emit(TraceEvent::SequentialPlan {
                        round: 0,
                        graph: plan.graph.clone(),
                        exchanges: plan.exchanges,
                    })?;
                    plan.graph
                }
                Err(e) => {
                    let graph = FlowGraph::new(&config.query).map_err(|e| RunError::InvalidConfig(e.to_string()))?;
                    let exchanges = e.exchanges().to_vec();
                    return session.abort(initial_state(graph), format!("planning failed: {e}"), exchanges);
                }
            },
        };
        session.tracer.snapshot(0, &graph)?;
        session.drive(initial_state(graph)).await
    }

    /// Continue a run from a checkpoint. With scripted backends the events
    /// after the leading `run_resumed` equal the uninterrupted run's events
    /// from `checkpoint.events_emitted` on.
    pub async fn resume(&self, checkpoint: &Checkpoint, config: &RunConfig) -> Result<RunTrace, RunError> {
        config.check()?;
        if checkpoint.query != config.query {
            return Err(RunError::Incompatible(format!(
                "checkpoint query {:?} differs from {:?}",
                checkpoint.query, config.query
            )));
        }
        if checkpoint.graph.query_node().description != checkpoint.query {
            return Err(RunError::Incompatible(
                "checkpoint graph does not hold the checkpoint query".into(),
            ));
        }
        if let Some(cursor) = &checkpoint.backend_cursor {
            self.backend.restore_cursor(cursor).map_err(RunError::Cursor)?;
        }
        let mut session = self.session(config, checkpoint.run_id.clone(), true)?;
        session.tracer.emit(TraceEvent::RunResumed {
            round: checkpoint.round,
            phase: checkpoint.phase,
        })?;
        session
            .drive(LoopState {
                round: checkpoint.round,
                phase: checkpoint.phase,
                graph: checkpoint.graph.clone(),
                stalled: checkpoint.stalled,
                degraded: checkpoint.degraded_reason.clone(),
            })
            .await
    }
}

fn initial_state(graph: FlowGraph) -> LoopState {
    LoopState {
        round: 0,
        phase: Phase::PreCollect,
        graph,
        stalled: false,
        degraded: None,
    }
}
