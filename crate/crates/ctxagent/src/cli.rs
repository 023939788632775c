//! Command-line entry points. Each command writes to a caller-supplied
//! writer so the commands can be exercised without a terminal.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctxagent_core::backend::{Backend, BackendRegistry};
use ctxagent_core::dispatch::ModeRegistry;
use ctxagent_core::eval::{self, EvalConfig, MatchMode};
use ctxagent_core::fixtures;
use ctxagent_core::schema::{self, BudgetMode};
use ctxagent_core::tokenizer::{Tokenizer, TokenizerRegistry};
use ctxagent_core::toolenv::{HandlerCatalog, ToolRegistry, VerbosityProfile};
use ctxagent_core::turn::{read_jsonl, Turn, TurnKind};
use ctxagent_core::{AgentMode, Session, SessionConfig};

use crate::service::{self, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ctxagent",
    version,
    about = "Context-efficient on-device agent runtime"
)]
pub struct Cli {
    /// Token counter used for all accounting.
    #[arg(long, global = true, default_value = TokenizerRegistry::DEFAULT)]
    pub tokenizer: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the JSON API.
    Serve(ServeArgs),
    /// Talk to the agent in the terminal.
    Chat(ChatArgs),
    /// Schema tooling.
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Evaluation runner.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Rebuild a session from a trajectory file and print its state.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// `scripted:<script.json>`, `http:<url>` or a bare http(s) URL.
    #[arg(long, env = "CTXAGENT_BACKEND_URL")]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Extra registry manifest to serve besides the bundled ones.
    #[arg(long, env = "CTXAGENT_REGISTRY")]
    pub registry: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub max_sessions: usize,
    /// Allowed CORS origin; repeat or use `*`.
    #[arg(long)]
    pub cors: Vec<String>,
    /// Persist sessions here and restore them on start.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Bundled registry id or manifest path.
    #[arg(long, env = "CTXAGENT_REGISTRY", default_value = fixtures::REGISTRY_19)]
    pub registry: String,
    #[arg(long, default_value = "combined")]
    pub mode: String,
}

#[derive(Debug, Subcommand)]
pub enum SchemaCommand {
    /// Print the compact single-line form of each schema in a file.
    Minify {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Token budget of a registry's tool section.
    Budget {
        /// Bundled registry id or manifest path.
        registry: String,
        #[arg(long, default_value = "full-compact")]
        mode: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Run scenarios in several modes and write report.json, series.csv and charts.
    Run(EvalRunArgs),
    /// Write the bundled scenario suites as JSON files.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalRunArgs {
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Comma-separated agent modes.
    #[arg(
        long,
        default_value = "baseline,tool-efficient,memory-efficient,combined"
    )]
    pub modes: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target length of cloud-tool observations.
    #[arg(long)]
    pub cloud_tokens: Option<usize>,
    /// Require every required parameter for a call to count as a match.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, env = "CTXAGENT_REGISTRY", default_value = fixtures::REGISTRY_19)]
    pub registry: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub trajectory: PathBuf,
    /// Registry to replay against; defaults to the one recorded in the file.
    #[arg(long)]
    pub registry: Option<String>,
}

pub fn tokenizer(name: &str) -> Result<Arc<dyn Tokenizer>> {
    Ok(TokenizerRegistry::default().get(name)?)
}

/// Bundled registry id or path to a manifest file.
pub fn load_registry(spec: &str, tok: Arc<dyn Tokenizer>) -> Result<ToolRegistry> {
    if let Some(r) = fixtures::bundled_registry(spec, tok.clone()) {
        return Ok(r);
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!(
            "no registry '{spec}' (bundled: {}, {})",
            fixtures::REGISTRY_19,
            fixtures::REGISTRY_12
        );
    }
    Ok(ToolRegistry::load(path, &HandlerCatalog::default(), tok)?)
}

pub fn backend_spec(arg: Option<&str>) -> Result<String> {
    let spec = arg.ok_or_else(|| {
        anyhow!("no backend configured; pass --backend or set CTXAGENT_BACKEND_URL")
    })?;
    if spec.starts_with("http://") || spec.starts_with("https://") {
        Ok(format!("http:{spec}"))
    } else {
        Ok(spec.to_string())
    }
}

fn parse_mode(name: &str) -> Result<AgentMode> {
    Ok(ModeRegistry::default().get(name)?)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let tok = tokenizer(&cli.tokenizer)?;
    match cli.command {
        Command::Serve(args) => serve(args, tok),
        Command::Chat(args) => {
            let spec = backend_spec(args.backend.backend.as_deref())?;
            let backend = BackendRegistry::default().build(&spec)?;
            let registry = Arc::new(load_registry(&args.registry, tok.clone())?);
            let mode = parse_mode(&args.mode)?;
            let session = Session::new(
                "chat",
                SessionConfig::for_mode(mode),
                registry,
                backend,
                tok,
            )?;
            let stdin = std::io::stdin();
            chat(session, &mut stdin.lock(), out)
        }
        Command::Schema(SchemaCommand::Minify { input, output }) => {
            let text = minify_file(&input, tok.as_ref())?;
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| p.display().to_string())?,
                None => out.write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Command::Schema(SchemaCommand::Budget {
            registry,
            mode,
            json,
        }) => {
            let mode: BudgetMode = mode.parse().map_err(|e: String| anyhow!(e))?;
            let reg = load_registry(&registry, tok.clone())?;
            let report = schema::registry_budget(&reg.schemas_vec(), mode, tok.as_ref());
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                write!(out, "{}", report.to_table())?;
            }
            Ok(())
        }
        Command::Eval(EvalCommand::Run(args)) => eval_run(&args, tok, out),
        Command::Eval(EvalCommand::Fixtures { out: dir }) => {
            let n = export_fixtures(&dir)?;
            writeln!(out, "wrote {n} scenarios to {}", dir.display())?;
            Ok(())
        }
        Command::Replay(args) => replay(&args, tok, out),
    }
}

fn serve(args: ServeArgs, tok: Arc<dyn Tokenizer>) -> Result<()> {
    let spec = backend_spec(args.backend.backend.as_deref())?;
    // Fail early on a bad spec rather than on the first session.
    BackendRegistry::default().build(&spec)?;
    let mut registries = vec![fixtures::registry(), fixtures::registry_12()];
    if let Some(r) = &args.registry {
        let extra = load_registry(r, tok.clone())?;
        registries.retain(|x| x.id() != extra.id());
        registries.push(extra);
    }
    let config = ServiceConfig {
        bind_addr: args.bind,
        backend_spec: spec.clone(),
        max_sessions: args.max_sessions,
        cors_origins: args.cors,
        data_dir: args.data_dir,
    };
    let mut state = AppState::new(registries, spec, tok, config.max_sessions);
    if let Some(dir) = &config.data_dir {
        state = state.with_data_dir(dir.clone());
    }
    let restored = state.restore().map_err(|e| anyhow!(e))?;
    if restored > 0 {
        tracing::info!(restored, "sessions restored");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(Arc::new(state), &config))
}

pub fn minify_file(path: &Path, tok: &dyn Tokenizer) -> Result<String> {
    let schemas = schema::load_schema_file(path)?;
    let mut out = String::new();
    for s in &schemas {
        out.push_str(&schema::minify(s, tok).text);
        out.push('\n');
    }
    Ok(out)
}

fn render_turn(t: &Turn) -> String {
    let label = match t.kind {
        TurnKind::DirectResponse => "assistant",
        TurnKind::ToolSelect => "select",
        TurnKind::ToolCall => "call",
        TurnKind::CloudDelegate => "cloud",
        TurnKind::Observation => "observation",
        TurnKind::SchemaInjection => "schema",
        TurnKind::StateUpdate => "state",
        TurnKind::UserMessage => "user",
        TurnKind::SessionStart => "start",
    };
    let tokens = t
        .input_context_tokens
        .map(|n| format!(" ({n} ctx)"))
        .unwrap_or_default();
    format!("[{label}{tokens}] {}", t.content)
}

/// Line-oriented REPL. `/cso` and `/cache` print state, `/quit` exits.
pub fn chat(mut session: Session, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "mode {}; /cso, /cache, /quit", session.mode().name())?;
    let mut line = String::new();
    loop {
        line.clear();
        write!(out, "> ")?;
        out.flush()?;
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/cso" => writeln!(out, "{}", session.cso().text())?,
            "/cache" => {
                for c in [session.executor_cache(), session.tracker_cache()] {
                    writeln!(
                        out,
                        "{:?}: permanent {} ephemeral {}",
                        c.adapter_id,
                        c.permanent_len(),
                        c.ephemeral_len()
                    )?;
                }
            }
            _ => match session.step_turn(text) {
                Ok(step) => {
                    for t in step
                        .turns
                        .iter()
                        .filter(|t| t.kind != TurnKind::UserMessage)
                    {
                        writeln!(out, "{}", render_turn(t))?;
                    }
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
        }
    }
    Ok(())
}

fn eval_run(args: &EvalRunArgs, tok: Arc<dyn Tokenizer>, out: &mut dyn Write) -> Result<()> {
    let modes = ModeRegistry::default().parse_list(&args.modes)?;
    let scenarios = eval::load_scenarios(&args.scenarios)
        .with_context(|| format!("loading {}", args.scenarios.display()))?;
    if scenarios.is_empty() {
        bail!("no scenarios in {}", args.scenarios.display());
    }
    let registry = Arc::new(load_registry(&args.registry, tok.clone())?);
    let cfg = EvalConfig {
        base_seed: args.seed,
        match_mode: if args.strict {
            MatchMode::Strict
        } else {
            MatchMode::ToolId
        },
        cloud_profile: args
            .cloud_tokens
            .map(|n| VerbosityProfile { target_tokens: n }),
        ..EvalConfig::default()
    };
    let report = eval::run_suite(&scenarios, &modes, args.repeats, registry, tok, &cfg);
    writeln!(
        out,
        "{:<22} {:<17} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>6}",
        "category", "mode", "P", "R", "F1", "slope", "initial", "final", "failed"
    )?;
    for g in &report.groups {
        writeln!(
            out,
            "{:<22} {:<17} {:>6.3} {:>6.3} {:>6.3} {:>8.2} {:>8.0} {:>8.0} {:>6}",
            g.category.slug(),
            g.mode,
            g.precision.mean,
            g.recall.mean,
            g.f1.mean,
            g.slope,
            g.initial_context,
            g.final_context,
            g.failed_runs
        )?;
    }
    if let Some(dir) = &args.out {
        eval::write_report(&report, dir)?;
        writeln!(out, "report written to {}", dir.display())?;
    }
    Ok(())
}

pub fn export_fixtures(dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let sets = [
        ("multi_tool.json", fixtures::multi_tool_suite(10, 10)),
        ("cloud.json", fixtures::cloud_suite(10, 10)),
        (
            "mixed.json",
            vec![fixtures::timer_then_cloud(), fixtures::small_talk()],
        ),
    ];
    let mut n = 0;
    for (name, scenarios) in sets {
        n += scenarios.len();
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&scenarios)?)?;
    }
    Ok(n)
}

fn replay(args: &ReplayArgs, tok: Arc<dyn Tokenizer>, out: &mut dyn Write) -> Result<()> {
    let file = std::fs::File::open(&args.trajectory)
        .with_context(|| args.trajectory.display().to_string())?;
    let turns = read_jsonl(std::io::BufReader::new(file))?;
    let reg_spec = match &args.registry {
        Some(r) => r.clone(),
        None => Session::recorded_registry_id(&turns)
            .ok_or_else(|| anyhow!("trajectory records no registry; pass --registry"))?,
    };
    let registry = Arc::new(load_registry(&reg_spec, tok.clone())?);
    let session = Session::replay(&turns, registry, tok)?;
    let matches = session.trajectory() == turns.as_slice();
    let summary = serde_json::json!({
        "sessionId": session.id(),
        "mode": session.mode().name(),
        "turns": session.trajectory().len(),
        "matchesInput": matches,
        "cso": session.cso().text(),
        "cache": session.caches(),
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    if !matches {
        bail!("replayed trajectory differs from the input");
    }
    Ok(())
}

/// The backend a command would use, exposed for tests.
pub fn build_backend(arg: Option<&str>) -> Result<Arc<dyn Backend>> {
    Ok(BackendRegistry::default().build(&backend_spec(arg)?)?)
}
