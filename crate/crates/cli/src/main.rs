//! `vrlab`: register and publish experiments, inspect the board, export
//! data, run simulated cohorts and analyses.

mod analyze;
mod output;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vrlab_client::{Client, ClientError, EXIT_NETWORK, EXIT_REJECTED};
use vrlab_core::config::ExperimentConfig;
use vrlab_core::dataplane::{ExportFormat, ExportKind};
use vrlab_core::questionnaire::QuestionnaireSpec;
use vrlab_server::ServerConfig;
use vrlab_sim::{CohortOptions, CohortSpec, RunPlan};

use crate::output::Output;

#[derive(Debug, Parser)]
#[command(name = "vrlab", version, about = "Experiment platform command line")]
struct Cli {
    /// Service endpoint.
    #[arg(long, global = true, env = "VRLAB_ENDPOINT", default_value = "http://127.0.0.1:8080")]
    endpoint: String,
    /// Shared researcher token.
    #[arg(long, global = true, env = "VRLAB_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Default directory for exports and reports.
    #[arg(long, global = true, env = "VRLAB_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the service.
    Serve(ServeArgs),
    /// Manage experiments.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Manage questionnaires.
    #[command(subcommand)]
    Questionnaire(QuestionnaireCmd),
    /// Show published experiments.
    Board,
    /// Download collected data.
    Export(ExportArgs),
    /// Simulated participants.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Analyze an export directory.
    Analyze(analyze::AnalyzeArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "VRLAB_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Append-only storage directory; in-memory when absent.
    #[arg(long, env = "VRLAB_STORAGE")]
    storage: Option<PathBuf>,
    /// Inactivity, in seconds, before a session counts as dropped.
    #[arg(long, env = "VRLAB_SESSION_TIMEOUT", default_value_t = 3600.0)]
    session_timeout: f64,
    /// Deterministic identifiers, for reproducible simulation runs.
    #[arg(long, env = "VRLAB_ID_SEED")]
    id_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum ExperimentCmd {
    /// Register an experiment configuration file.
    Register { file: PathBuf },
    /// Replace the configuration of an experiment nobody has joined yet.
    Update { id: String, file: PathBuf },
    Publish { id: String },
    Unpublish { id: String },
    Show { id: String },
    List,
    /// Sessions of an experiment.
    Sessions { id: String },
    /// Instances of an experiment.
    Instances { id: String },
}

#[derive(Debug, Subcommand)]
enum QuestionnaireCmd {
    Register { file: PathBuf },
    /// Edit a questionnaire; creates a new version once answered.
    Revise { file: PathBuf },
    Show { id: String },
    List,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Frames,
    Trials,
    Responses,
    Sessions,
}

impl From<KindArg> for ExportKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Frames => ExportKind::Frames,
            KindArg::Trials => ExportKind::Trials,
            KindArg::Responses => ExportKind::Responses,
            KindArg::Sessions => ExportKind::Sessions,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ExportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ExportFormat::Csv,
            FormatArg::Json => ExportFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
struct ExportArgs {
    id: String,
    /// One kind; every kind into `<out-dir>/<id>/` when absent.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// File to write; stdout when absent (single kind only).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Register, publish and run a simulated cohort, then export its data.
    Run(SimRunArgs),
}

#[derive(Debug, Args)]
struct SimRunArgs {
    /// Bundled experiment id or a configuration file.
    #[arg(long)]
    experiment: String,
    /// Cohort spec file; the experiment's bundled cohort when absent.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Cohort size; the spec's size when absent.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 8)]
    parallelism: usize,
    /// Run against a private service on loopback instead of `--endpoint`.
    #[arg(long)]
    local: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_REJECTED as u8,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let mut message = e.to_string();
        if let ClientError::Api { body, .. } = &e {
            if let Some(report) = &body.report {
                for v in &report.violations {
                    message.push_str(&format!("\n  - {v}"));
                }
            }
        }
        Failure {
            code: e.exit_code() as u8,
            message,
        }
    }
}

impl From<vrlab_sim::SimError> for Failure {
    fn from(e: vrlab_sim::SimError) -> Self {
        match e {
            vrlab_sim::SimError::Client(c) => c.into(),
            vrlab_sim::SimError::Io(m) => Failure::io(m),
            other => Failure::invalid(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn check_endpoint(endpoint: &str) -> Result<(), Failure> {
    let rest = endpoint
        .strip_prefix("http://")
        .or_else(|| endpoint.strip_prefix("https://"))
        .ok_or_else(|| Failure::invalid(format!("endpoint `{endpoint}` must start with http:// or https://")))?;
    let host = rest.split('/').next().unwrap_or_default();
    if host.is_empty() || host.contains(char::is_whitespace) {
        return Err(Failure::invalid(format!("endpoint `{endpoint}` has no host")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_REJECTED as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let out = Output { json: cli.json };
    let client = || -> Result<Client, Failure> {
        check_endpoint(&cli.endpoint)?;
        Ok(Client::new(&cli.endpoint).with_token(cli.token.clone()))
    };
    match &cli.command {
        Command::Serve(args) => serve(args, cli.token.clone()),
        Command::Experiment(cmd) => experiment(&client()?, cmd, &out),
        Command::Questionnaire(cmd) => questionnaire(&client()?, cmd, &out),
        Command::Board => {
            let board = client()?.board()?;
            out.board(&board);
            Ok(())
        }
        Command::Export(args) => export(&client()?, args, &cli.out_dir, &out),
        Command::Sim(SimCmd::Run(args)) => sim_run(&cli, args, &out),
        Command::Analyze(args) => analyze::run(args, &cli.out_dir, &out),
    }
}

fn serve(args: &ServeArgs, token: Option<String>) -> CmdResult {
    let config = ServerConfig {
        bind: args.bind,
        storage: args.storage.clone(),
        session_timeout_s: args.session_timeout,
        token: token.filter(|t| !t.is_empty()),
        id_seed: args.id_seed,
        ..ServerConfig::default()
    };
    if !(config.session_timeout_s > 0.0) {
        return Err(Failure::invalid("session timeout must be positive"));
    }
    let platform = std::sync::Arc::new(config.platform().map_err(|e| Failure::io(e.to_string()))?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.worker_threads)
        .enable_all()
        .build()
        .map_err(|e| Failure::io(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.bind)
            .await
            .map_err(|e| Failure {
                code: EXIT_NETWORK as u8,
                message: format!("cannot bind {}: {e}", config.bind),
            })?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        vrlab_server::serve(listener, platform, &config, shutdown)
            .await
            .map_err(|e| Failure::io(e.to_string()))
    })
}

fn experiment(c: &Client, cmd: &ExperimentCmd, out: &Output) -> CmdResult {
    match cmd {
        ExperimentCmd::Register { file } => {
            let config: ExperimentConfig = read_json(file)?;
            let id = c.register_experiment(&config)?;
            out.id("experiment_id", &id);
        }
        ExperimentCmd::Update { id, file } => {
            let config: ExperimentConfig = read_json(file)?;
            out.experiment(&c.update_experiment(id, &config)?);
        }
        ExperimentCmd::Publish { id } => out.experiment(&c.set_published(id, true)?),
        ExperimentCmd::Unpublish { id } => out.experiment(&c.set_published(id, false)?),
        ExperimentCmd::Show { id } => out.value(&c.experiment(id)?),
        ExperimentCmd::List => out.experiments(&c.experiments()?),
        ExperimentCmd::Sessions { id } => out.sessions(&c.sessions(id)?),
        ExperimentCmd::Instances { id } => out.value(&c.instances(id)?),
    }
    Ok(())
}

fn questionnaire(c: &Client, cmd: &QuestionnaireCmd, out: &Output) -> CmdResult {
    match cmd {
        QuestionnaireCmd::Register { file } => {
            let spec: QuestionnaireSpec = read_json(file)?;
            out.id("questionnaire_id", &c.register_questionnaire(&spec)?);
        }
        QuestionnaireCmd::Revise { file } => {
            let spec: QuestionnaireSpec = read_json(file)?;
            let version = c.revise_questionnaire(&spec)?;
            out.id("version", &version.to_string());
        }
        QuestionnaireCmd::Show { id } => out.value(&c.questionnaire(id)?),
        QuestionnaireCmd::List => out.questionnaires(&c.questionnaires()?),
    }
    Ok(())
}

fn export(c: &Client, args: &ExportArgs, out_dir: &Path, out: &Output) -> CmdResult {
    let format: ExportFormat = args.format.into();
    match args.kind {
        Some(kind) => {
            let bytes = c.export(&args.id, kind.into(), format)?;
            match &args.output {
                Some(path) => {
                    std::fs::write(path, &bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
                    out.written(&[path.clone()]);
                }
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&bytes).map_err(|e| Failure::io(e.to_string()))?;
                }
            }
        }
        None => {
            let dir = args.output.clone().unwrap_or_else(|| out_dir.join(&args.id));
            vrlab_sim::export_all(c, &args.id, format, &dir)?;
            let files: Vec<PathBuf> = ExportKind::ALL
                .iter()
                .map(|k| dir.join(format!("{k}.{}", format.extension())))
                .collect();
            out.written(&files);
        }
    }
    Ok(())
}

fn sim_run(cli: &Cli, args: &SimRunArgs, out: &Output) -> CmdResult {
    let config = match vrlab_sim::bundled_experiment(&args.experiment) {
        Some(c) => c,
        None => read_json(Path::new(&args.experiment))?,
    };
    let cohort = match &args.cohort {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            CohortSpec::from_json(&text)?
        }
        None => {
            let id = config.meta.id.clone().unwrap_or_default();
            vrlab_sim::bundled::cohort(&id)
                .ok_or_else(|| Failure::invalid(format!("no bundled cohort for `{id}`; pass --cohort")))?
        }
    };
    if args.n == Some(0) {
        return Err(Failure::invalid("a cohort needs at least one participant"));
    }
    let plan = RunPlan {
        config,
        cohort,
        n: args.n,
        seed: args.seed,
        options: CohortOptions {
            parallelism: args.parallelism.max(1),
        },
        out_dir: cli.out_dir.clone(),
        format: args.format.into(),
    };
    let local;
    let client = if args.local {
        local = vrlab_server::spawn(ServerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            id_seed: Some(args.seed),
            token: cli.token.clone(),
            ..ServerConfig::default()
        })
        .map_err(|e| Failure::io(e.to_string()))?;
        Client::new(&local.url()).with_token(cli.token.clone())
    } else {
        check_endpoint(&cli.endpoint)?;
        Client::new(&cli.endpoint).with_token(cli.token.clone())
    };
    let summary = vrlab_sim::run_experiment(&client, &plan)?;
    out.summary(&summary);
    Ok(())
}
