use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tpgo::gateway::{CallRole, ChatGateway, GatewayEnv, ModelConfig};
use tpgo::graph::parse::{merge, parse_prompt, ParseError};
use tpgo::graph::{deserialize, diff, serialize, NodeId, TextualParameterGraph};
use tpgo::memory::ExperienceMemory;
use tpgo::orchestrator::{
    cost_report, replay, Ablations, Archive, ConfigError, Evolution, IterationReport, LoopParams,
    ProviderSettings, ReplayError, RunConfig, RunError, RunOutcome, Services, Task,
};
use tpgo::sim::{fixture, ChatScript, ScriptedChat, FIXTURE_NAMES};

/// Exit codes: 0 success, 1 provider failure or replay mismatch, 2 config
/// error, 3 storage error.
#[derive(Debug)]
enum Failure {
    Provider(String),
    Mismatch(String),
    Config(String),
    Storage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Provider(_) | Failure::Mismatch(_) => 1,
            Failure::Config(_) => 2,
            Failure::Storage(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Provider(m)
            | Failure::Mismatch(m)
            | Failure::Config(m)
            | Failure::Storage(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_storage() {
            Failure::Storage(e.to_string())
        } else if matches!(e, RunError::Provider(_)) {
            Failure::Provider(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "tpgo",
    version,
    about = "Optimize agent-system prompts as a typed graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose prompt files into a graph document.
    Parse(ParseArgs),
    /// Run the optimization loop.
    Optimize(OptimizeArgs),
    /// Inspect an experience memory file.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Inspect graph documents.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Recompute an archived run and compare graph hashes.
    Replay { archive: PathBuf },
    /// Token and time cost of an archived run.
    Cost { archive: PathBuf },
}

#[derive(Args)]
struct ParseArgs {
    /// One or more prompt files; each becomes one root.
    #[arg(required = true)]
    prompts: Vec<PathBuf>,
    /// Output graph document.
    #[arg(short, long)]
    out: PathBuf,
    /// Run config whose `[providers]` table selects the parser model.
    #[arg(long, conflicts_with = "script")]
    config: Option<PathBuf>,
    /// Scripted parser replies (JSON chat script) instead of a live provider.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Run config file (TOML).
    #[arg(long, required_unless_present = "fixture", conflicts_with = "fixture")]
    config: Option<PathBuf>,
    /// Built-in offline suite.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(FIXTURE_NAMES))]
    fixture: Option<String>,
    /// Archive directory; defaults to the config's `archive_dir` or `runs/<fixture>`.
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Experience memory file shared across runs; defaults to `<archive>/memory.jsonl`.
    #[arg(long)]
    memory: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<u32>,
    /// Agent runs in flight at once.
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimize one flat prompt per root instead of the node graph.
    #[arg(long)]
    no_graph: bool,
    /// Allow only node rewrites.
    #[arg(long)]
    no_structural_edits: bool,
    /// One proposal per gradient instead of per cluster.
    #[arg(long)]
    no_clustering: bool,
    /// Deal gradients into random groups of the same count.
    #[arg(long)]
    random_clustering: bool,
    /// Omit past attempts from optimizer prompts.
    #[arg(long)]
    no_grao: bool,
}

#[derive(Subcommand)]
enum MemoryCommand {
    /// One line per entry.
    Ls { path: PathBuf },
    /// One entry in full.
    Show { path: PathBuf, id: String },
    /// The whole store as one JSON document.
    Export {
        path: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Node tree with ids, kinds and edges.
    Show { graph: PathBuf },
    /// Edits that turn the first graph into the second.
    Diff { before: PathBuf, after: PathBuf },
    /// Rendered prompt text per root.
    Materialize {
        graph: PathBuf,
        #[arg(long)]
        root: Option<String>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Parse(args) => cmd_parse(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Memory(cmd) => cmd_memory(cmd),
        Command::Graph(cmd) => cmd_graph(cmd),
        Command::Replay { archive } => cmd_replay(&archive),
        Command::Cost { archive } => cmd_cost(&archive),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Storage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Storage(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<TextualParameterGraph, Failure> {
    deserialize(&read_input(path)?).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn cmd_parse(args: ParseArgs) -> CliResult {
    let env = GatewayEnv::default();
    let parser = match (&args.script, &args.config) {
        (Some(script), _) => {
            let script: ChatScript = serde_json::from_str(&read_input(script)?)
                .map_err(|e| Failure::Config(format!("{}: {e}", script.display())))?;
            ChatGateway::new(
                Arc::new(ScriptedChat::from_script(script)),
                ModelConfig::named("scripted"),
                CallRole::Parser,
                env,
            )
        }
        (None, Some(config)) => ProviderSettings::load(config)?.parser_gateway(env)?,
        (None, None) => ProviderSettings::default().parser_gateway(env)?,
    };
    let mut graphs = Vec::new();
    for path in &args.prompts {
        let text = read_input(path)?;
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("prompt");
        let outcome = parse_prompt(&text, label, &parser).map_err(|e| match e {
            ParseError::EmptyPrompt(_) => Failure::Config(format!("{}: {e}", path.display())),
            ParseError::Transport(_) => Failure::Provider(e.to_string()),
        })?;
        if outcome.unparsed {
            eprintln!(
                "warning: {} could not be decomposed; stored as one leaf",
                path.display()
            );
        }
        graphs.push(outcome.graph);
    }
    let graph = merge(graphs).map_err(|e| Failure::Config(e.to_string()))?;
    write_output(&args.out, &serialize(&graph))?;
    println!("nodes: {}", graph.node_count());
    println!("edges: {}", graph.edge_count());
    Ok(())
}

fn apply_overrides(params: &mut LoopParams, args: &OptimizeArgs) {
    if let Some(n) = args.max_iterations {
        params.max_iterations = n;
    }
    if let Some(n) = args.concurrency {
        params.concurrency = n;
    }
    if let Some(s) = args.seed {
        params.seed = s;
    }
    let a: &mut Ablations = &mut params.ablations;
    a.no_graph |= args.no_graph;
    a.no_structural_edits |= args.no_structural_edits;
    a.no_clustering |= args.no_clustering;
    a.random_clustering |= args.random_clustering;
    a.no_grao |= args.no_grao;
}

struct Prepared {
    params: LoopParams,
    services: Services,
    tasks: Vec<Task>,
    graph: TextualParameterGraph,
    archive_dir: PathBuf,
    memory_path: PathBuf,
}

fn prepare(args: &OptimizeArgs) -> Result<Prepared, Failure> {
    if let Some(name) = &args.fixture {
        let mut params = LoopParams::default();
        apply_overrides(&mut params, args);
        let bundle = fixture(name, params.seed).expect("fixture names are validated by clap");
        let archive_dir = args
            .archive
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(name));
        return Ok(Prepared {
            services: bundle.services(GatewayEnv::deterministic()).services,
            tasks: bundle.tasks(),
            graph: bundle.graph().map_err(|e| Failure::Config(e.to_string()))?,
            memory_path: args
                .memory
                .clone()
                .unwrap_or_else(|| archive_dir.join("memory.jsonl")),
            archive_dir,
            params,
        });
    }
    let config = RunConfig::load(
        args.config
            .as_ref()
            .expect("clap requires --config without --fixture"),
    )?;
    let mut params = config.loop_params();
    apply_overrides(&mut params, args);
    let archive_dir = args
        .archive
        .clone()
        .unwrap_or_else(|| config.archive_dir.clone());
    Ok(Prepared {
        services: config.services(GatewayEnv::default())?,
        tasks: config.load_suite()?,
        graph: config.load_graph()?,
        memory_path: args.memory.clone().unwrap_or_else(|| {
            config
                .memory_path
                .clone()
                .unwrap_or_else(|| archive_dir.join("memory.jsonl"))
        }),
        archive_dir,
        params,
    })
}

fn print_table(reports: &[IterationReport]) {
    println!(
        "{:>4}  {:>14}  {:>14}  {:>8}  {:>11}  {:>8}  {:>10}",
        "iter", "success_before", "success_after", "clusters", "accepted", "rolled", "tokens"
    );
    for r in reports {
        println!(
            "{:>4}  {:>9} {:>4.2}  {:>9} {:>4.2}  {:>8}  {:>11}  {:>8}  {:>10}",
            r.iteration,
            format!("{}/{}", r.passed_before, r.task_count),
            r.success_before,
            format!("{}/{}", r.passed_after, r.task_count),
            r.success_after,
            r.cluster_count,
            r.proposals_accepted,
            r.proposals_rolled_back,
            r.usage.total_tokens(),
        );
    }
}

fn cmd_optimize(args: OptimizeArgs) -> CliResult {
    let p = prepare(&args)?;
    if p.params.max_iterations == 0 || p.params.concurrency == 0 {
        return Err(Failure::Config(
            "--max-iterations and --concurrency must be >= 1".into(),
        ));
    }
    if p.archive_dir.join("run_meta.json").exists() {
        return Err(Failure::Config(format!(
            "{} already holds a run archive",
            p.archive_dir.display()
        )));
    }
    let archive = Archive::create(&p.archive_dir)?;
    let memory = ExperienceMemory::open(&p.memory_path).map_err(RunError::from)?;
    let mut evolution = Evolution::new(
        p.params,
        p.services,
        p.tasks,
        p.graph,
        memory,
        Some(archive),
        args.fixture.as_deref(),
    )?;
    let RunOutcome { reports, cost, .. } = evolution.optimize()?;
    print_table(&reports);
    if let Some(last) = reports.last() {
        println!("final success: {}/{}", last.passed_after, last.task_count);
    }
    if let Some(cost) = cost {
        println!(
            "tokens: {} over {} trajectories ({:.1} per trajectory)",
            cost.total_tokens, cost.trajectory_count, cost.amortized_tokens
        );
    }
    println!("archive: {}", p.archive_dir.display());
    Ok(())
}

fn memory_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("memory.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn open_memory(path: &Path) -> Result<ExperienceMemory, Failure> {
    let file = memory_file(path);
    if !file.exists() {
        return Err(Failure::Config(format!(
            "{}: no such memory file",
            file.display()
        )));
    }
    ExperienceMemory::open(&file).map_err(|e| Failure::Storage(e.to_string()))
}

fn one_line(text: &str, width: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= width {
        flat
    } else {
        format!(
            "{}...",
            flat.chars()
                .take(width.saturating_sub(3))
                .collect::<String>()
        )
    }
}

fn cmd_memory(cmd: MemoryCommand) -> CliResult {
    match cmd {
        MemoryCommand::Ls { path } => {
            let memory = open_memory(&path)?;
            for e in memory.entries() {
                println!(
                    "{}  iter {:>2}  E={:.2}  {}  {}",
                    e.entry_id,
                    e.iteration,
                    e.effectiveness,
                    if e.accepted { "accepted" } else { "rejected" },
                    one_line(&e.problem_context, 60)
                );
            }
            Ok(())
        }
        MemoryCommand::Show { path, id } => {
            let memory = open_memory(&path)?;
            let entry = memory
                .get(&id)
                .ok_or_else(|| Failure::Config(format!("no entry `{id}`")))?;
            println!(
                "{}",
                serde_json::to_string_pretty(entry).expect("entries serialize")
            );
            Ok(())
        }
        MemoryCommand::Export { path, out } => {
            let memory = open_memory(&path)?;
            let mut doc =
                serde_json::to_string_pretty(memory.entries()).expect("entries serialize");
            doc.push('\n');
            match out {
                Some(out) => write_output(&out, &doc),
                None => {
                    print!("{doc}");
                    Ok(())
                }
            }
        }
    }
}

fn show_tree(graph: &TextualParameterGraph, id: &NodeId, depth: usize) {
    let node = graph.node(id).expect("ids come from the graph");
    let content = node
        .content
        .as_deref()
        .map(|c| format!(": {}", one_line(c, 70)))
        .unwrap_or_default();
    println!(
        "{}{} [{}] {}{}",
        "  ".repeat(depth),
        node.id,
        node.kind,
        node.title,
        content
    );
    for child in &node.children {
        show_tree(graph, child, depth + 1);
    }
}

fn cmd_graph(cmd: GraphCommand) -> CliResult {
    match cmd {
        GraphCommand::Show { graph } => {
            let g = load_graph(&graph)?;
            println!("version {}  hash {}", g.version(), g.content_hash());
            for root in g.roots() {
                show_tree(&g, root, 0);
            }
            for e in g.edges() {
                let label = e.label.map(|l| format!(" ({l})")).unwrap_or_default();
                println!("edge {} -> {}{label}", e.from, e.to);
            }
            Ok(())
        }
        GraphCommand::Diff { before, after } => {
            let edits = diff(&load_graph(&before)?, &load_graph(&after)?);
            println!(
                "{}",
                serde_json::to_string_pretty(&edits).expect("edits serialize")
            );
            Ok(())
        }
        GraphCommand::Materialize { graph, root } => {
            let g = load_graph(&graph)?;
            match root {
                Some(root) => {
                    let text = g
                        .materialize(&NodeId::new(root))
                        .map_err(|e| Failure::Config(e.to_string()))?;
                    println!("{text}");
                }
                None => {
                    for (id, text) in g.materialize_all().prompts {
                        println!("=== {id} ===\n{text}");
                    }
                }
            }
            Ok(())
        }
    }
}

fn cmd_replay(archive: &Path) -> CliResult {
    match replay(archive) {
        Ok(outcome) => {
            println!(
                "replay ok: {} iterations, {} accepted proposals, final hash {}",
                outcome.iterations, outcome.accepted_proposals, outcome.final_hash
            );
            Ok(())
        }
        Err(e @ ReplayError::Diverged { .. }) => Err(Failure::Mismatch(e.to_string())),
        Err(e @ ReplayError::Malformed { .. }) => Err(Failure::Mismatch(e.to_string())),
        Err(e @ ReplayError::NoIterations) => Err(Failure::Mismatch(e.to_string())),
        Err(e @ ReplayError::Io { .. }) => Err(Failure::Storage(e.to_string())),
    }
}

fn cmd_cost(archive: &Path) -> CliResult {
    if !archive.join("run_meta.json").exists() {
        return Err(Failure::Storage(format!(
            "{}: not a run archive",
            archive.display()
        )));
    }
    let reports = Archive::create(archive)
        .map_err(|e| Failure::Storage(e.to_string()))?
        .reports()
        .map_err(|e| Failure::Storage(e.to_string()))?;
    let cost = cost_report(&reports).map_err(|e| Failure::Config(e.to_string()))?;
    println!("iterations:            {}", cost.iterations);
    println!("trajectories:          {}", cost.trajectory_count);
    println!("prompt tokens:         {}", cost.prompt_tokens);
    println!("completion tokens:     {}", cost.completion_tokens);
    println!("total tokens:          {}", cost.total_tokens);
    println!("wall time (ms):        {}", cost.wall_time_ms);
    println!("tokens / trajectory:   {:.2}", cost.amortized_tokens);
    println!("time / trajectory (ms): {:.2}", cost.amortized_time_ms);
    for (role, usage) in &cost.by_role {
        println!("  {role:<10} {:>10} tokens", usage.total_tokens());
    }
    Ok(())
}
