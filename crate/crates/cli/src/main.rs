//! `knowflow`: run a research query through the plan / collect / refine /
//! conclude loop.
//!
//! Exit codes: 0 success, 2 degraded conclusion, 3 aborted run or setup
//! failure, 64 bad command line.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use knowflow::backend::{load_scenario, Backend, RecordingBackend, RemoteBackend, RemoteConfig, ScriptedBackend, ToolCatalog};
use knowflow::orchestrator::{
    dialogue_jsonl, export_dot, export_planner_dialogue, Checkpoint, Engine, OutputPaths, RunConfig, RunStatus,
};
use knowflow::planner::PlannerMode;
use knowflow::prompts::Prompts;
use knowflow::summarizer::SummaryMode;
use knowflow::time::{Clock, FrozenClock, SystemClock};

const EXIT_ABORTED: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Qa,
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlannerArg {
    Flow,
    Sequential,
}

#[derive(Debug, Clone)]
enum BackendSpec {
    Scripted(PathBuf),
    Remote,
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => Ok(BackendSpec::Scripted(PathBuf::from(path))),
            None if s == "remote" => Ok(BackendSpec::Remote),
            _ => Err(format!("expected `scripted:PATH` or `remote`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
enum ToolSpec {
    Http { name: String, url: String },
    Disabled { name: String },
}

impl FromStr for ToolSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, kind) = s
            .split_once('=')
            .ok_or_else(|| format!("expected NAME=http:URL or NAME=disabled, got `{s}`"))?;
        let name = name.to_owned();
        match kind.split_once(':') {
            Some(("http", url)) => Ok(ToolSpec::Http {
                name,
                url: format!("http:{url}"),
            }),
            Some(("https", url)) => Ok(ToolSpec::Http {
                name,
                url: format!("https:{url}"),
            }),
            _ if kind == "disabled" => Ok(ToolSpec::Disabled { name }),
            _ => Err(format!("unknown tool backing `{kind}`")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "knowflow", version, about = "Plan, execute and refine a knowledge-flow graph for a query")]
struct Cli {
    /// The research query. Optional with --resume.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, value_enum, default_value = "qa")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "flow")]
    planner: PlannerArg,
    /// Skip refinement between rounds.
    #[arg(long)]
    no_refine: bool,
    #[arg(long, default_value_t = 12)]
    max_rounds: u32,
    /// `scripted:PATH` to replay a scenario file, or `remote`.
    #[arg(long, default_value = "remote")]
    backend: BackendSpec,
    /// Append-only JSONL event log.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Directory for per-round graph snapshots.
    #[arg(long)]
    snapshots: Option<PathBuf>,
    /// Emit the DOT rendering of this round's snapshot (0 = planned graph).
    #[arg(long)]
    dot_round: Option<u32>,
    /// Where --dot-round writes; standard output by default.
    #[arg(long)]
    dot_out: Option<PathBuf>,
    /// Report file written in report mode.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the planner dialogue records as JSONL.
    #[arg(long)]
    export_dialogue: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_parallel: usize,
    /// Per-node timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    /// Checkpoint file, rewritten at every phase boundary.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override a tool: NAME=http:URL or NAME=disabled. Repeatable.
    #[arg(long = "tool")]
    tools: Vec<ToolSpec>,
    /// Save every exchange of this run as a replayable scenario.
    #[arg(long)]
    record_scenario: Option<PathBuf>,
    /// JSON file overriding instruction texts.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

struct Setup {
    backend: Arc<dyn Backend>,
    recorder: Option<Arc<RecordingBackend>>,
    tools: ToolCatalog,
    clock: Arc<dyn Clock>,
}

fn build_backend(cli: &Cli) -> Result<Setup> {
    let (backend, mut tools, clock): (Arc<dyn Backend>, ToolCatalog, Arc<dyn Clock>) = match &cli.backend {
        BackendSpec::Scripted(path) => {
            let scenario = load_scenario(path).with_context(|| format!("loading scenario {}", path.display()))?;
            let tools = scenario.tool_catalog();
            (Arc::new(ScriptedBackend::new(scenario)), tools, Arc::new(FrozenClock))
        }
        BackendSpec::Remote => {
            let config = RemoteConfig::from_env()?;
            (
                Arc::new(RemoteBackend::new(config)?),
                ToolCatalog::standard(),
                Arc::new(SystemClock::default()),
            )
        }
    };
    for spec in &cli.tools {
        match spec {
            ToolSpec::Http { name, url } => tools.set_http_stub(name, url),
            ToolSpec::Disabled { name } => tools.set_disabled(name),
        };
    }
    let (backend, recorder) = match &cli.record_scenario {
        Some(_) => {
            let rec = Arc::new(RecordingBackend::new(backend));
            (Arc::clone(&rec) as Arc<dyn Backend>, Some(rec))
        }
        None => (backend, None),
    };
    Ok(Setup {
        backend,
        recorder,
        tools,
        clock,
    })
}

async fn execute(cli: Cli) -> Result<u8> {
    let setup = build_backend(&cli)?;
    let checkpoint = match &cli.resume {
        Some(path) => Some(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?),
        None => None,
    };
    let query = match (&cli.query, &checkpoint) {
        (Some(q), _) => q.clone(),
        (None, Some(cp)) => cp.query.clone(),
        (None, None) => bail!("--query is required unless --resume is given"),
    };

    let mut config = RunConfig::new(query);
    config.mode = match cli.mode {
        ModeArg::Qa => SummaryMode::Qa,
        ModeArg::Report => SummaryMode::Report,
    };
    config.planner.mode = match cli.planner {
        PlannerArg::Flow => PlannerMode::Flow,
        PlannerArg::Sequential => PlannerMode::Sequential,
    };
    config.refinement_enabled = !cli.no_refine;
    config.max_rounds = cli.max_rounds;
    config.executor.max_parallel = cli.max_parallel;
    config.executor.per_node_timeout = Duration::from_secs(cli.timeout);
    config.outputs = OutputPaths {
        trace: cli.trace.clone(),
        snapshots: cli.snapshots.clone(),
        report: cli.report_out.clone(),
        checkpoint: cli.checkpoint.clone(),
    };

    let mut engine = Engine::new(Arc::clone(&setup.backend), setup.tools.clone()).with_clock(setup.clock);
    if let Some(path) = &cli.prompts {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let prompts: Prompts = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        engine = engine.with_prompts(prompts);
    }

    let trace = match &checkpoint {
        Some(cp) => engine.resume(cp, &config).await?,
        None => engine.run(&config).await?,
    };

    if let Some(conclusion) = trace.conclusion() {
        println!("{}", conclusion.answer);
    }
    match trace.status() {
        Some(RunStatus::Success) => {}
        Some(status) => eprintln!(
            "run {}: {}",
            if status == RunStatus::Degraded { "degraded" } else { "aborted" },
            trace.reason().unwrap_or("no reason recorded")
        ),
        None => eprintln!("run did not finish"),
    }

    if let Some(path) = &cli.export_dialogue {
        match export_planner_dialogue(&trace) {
            Ok(records) => std::fs::write(path, dialogue_jsonl(&records))
                .with_context(|| format!("writing {}", path.display()))?,
            Err(e) => eprintln!("dialogue export skipped: {e}"),
        }
    }
    if let Some(round) = cli.dot_round {
        let dot = export_dot(&trace, round)?;
        match &cli.dot_out {
            Some(path) => std::fs::write(path, dot).with_context(|| format!("writing {}", path.display()))?,
            None => print!("{dot}"),
        }
    }
    if let (Some(path), Some(recorder)) = (&cli.record_scenario, &setup.recorder) {
        let calls: Vec<_> = trace
            .execution_records()
            .into_iter()
            .flat_map(|r| r.tool_calls.iter().cloned())
            .collect();
        std::fs::write(path, recorder.to_scenario(&calls).to_json())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(trace.exit_code() as u8)
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match execute(cli).await {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ABORTED)
        }
    }
}
