use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use twinlod::broker::{BrokerError, ContextBroker, HttpBrokerClient, Query};
use twinlod::entity::EntityId;
use twinlod::odp::{HttpPortalClient, PortalApi, PortalError, SearchFilters};
use twinlod::stack::{self, Stack, StackConfig, StackError};
use twinlod::twin::{run_scenario, ScenarioConfig, TwinError};

/// Runs, exercises and inspects the parking and urban twin services.
///
/// Every setting in the stack config can be overridden with a `TWINLOD_`
/// environment variable, for example `TWINLOD_PORT_ODP=5001` or
/// `TWINLOD_DISABLED=odp`.
#[derive(Debug, Parser)]
#[command(name = "twinlod", version)]
struct Cli {
    /// Stack configuration file.
    #[arg(long, global = true, env = "TWINLOD_CONFIG", default_value = "config/stack.json")]
    config: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "TWINLOD_LOG_LEVEL", default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start all services and keep them running until interrupted.
    Serve,
    /// Start a fresh stack, run a scenario against it and grade the result.
    Scenario {
        /// Scenario file; defaults to the one named in the stack config.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long, env = "TWINLOD_REPORT")]
        report: Option<PathBuf>,
    },
    /// Read state from a running stack.
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
}

#[derive(Debug, Subcommand)]
enum Inspect {
    /// Broker entities in simplified form.
    Entities {
        #[arg(long = "type")]
        entity_type: Option<String>,
        #[arg(long, value_enum, default_value_t = BrokerArg::Urban)]
        broker: BrokerArg,
    },
    /// Portal datasets.
    Datasets,
    /// DCAT RDF/XML export of one dataset.
    Dcat { name: String },
    /// History rows recorded for one entity.
    History { entity: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BrokerArg {
    Parking,
    Urban,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Service(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invariant(_) | CliError::NotFound(_) => 1,
            CliError::Config(_) => 2,
            CliError::Service(_) => 3,
        }
    }
}

impl From<StackError> for CliError {
    fn from(e: StackError) -> Self {
        match e.exit_code() {
            2 => CliError::Config(e.to_string()),
            _ => CliError::Service(e.to_string()),
        }
    }
}

impl From<TwinError> for CliError {
    fn from(e: TwinError) -> Self {
        match e {
            TwinError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Service(e.to_string()),
        }
    }
}

impl From<BrokerError> for CliError {
    fn from(e: BrokerError) -> Self {
        match e {
            BrokerError::NotFound(_) => CliError::NotFound(e.to_string()),
            BrokerError::Unavailable(_) => CliError::Service(format!("service unavailable: {e}")),
            _ => CliError::Service(e.to_string()),
        }
    }
}

impl From<PortalError> for CliError {
    fn from(e: PortalError) -> Self {
        match e {
            PortalError::DatasetNotFound(_) | PortalError::ResourceNotFound(_) => CliError::NotFound(e.to_string()),
            _ => CliError::Service(format!("service unavailable: {e}")),
        }
    }
}

fn load_config(path: &Path) -> Result<StackConfig, CliError> {
    let mut cfg = StackConfig::load(path)?;
    cfg.apply_env(std::env::vars())?;
    Ok(cfg)
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        let mut term =
            tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn serve(cfg: StackConfig) -> Result<(), CliError> {
    let stack = Stack::start(cfg).await?;
    let health = stack.health().await;
    for h in &health {
        let state = if h.ready {
            "ready"
        } else if stack.config.is_enabled(&h.name) {
            "down"
        } else {
            "disabled"
        };
        println!("{state} {} {}", h.name, h.url);
    }
    let ready = health.iter().filter(|h| h.ready).count();
    println!("{ready} services ready");
    wait_for_signal().await;
    stack.shutdown().await;
    Ok(())
}

async fn scenario(cfg: StackConfig, scenario: Option<PathBuf>, report: Option<PathBuf>) -> Result<(), CliError> {
    let path = scenario
        .or_else(|| cfg.scenario.clone())
        .ok_or_else(|| CliError::Config("no scenario given and none in the stack config".into()))?;
    let sc = ScenarioConfig::load(&path)?;
    let stack = Stack::start(cfg).await?;
    let result = run_scenario(&stack, &sc).await;
    stack.shutdown().await;
    let r = result?;
    if let Some(p) = &report {
        std::fs::write(p, r.to_json_pretty() + "\n")
            .map_err(|e| CliError::Config(format!("cannot write report {}: {e}", p.display())))?;
    }
    let datasets: Vec<&str> = r.datasets.iter().map(|d| d.name.as_str()).collect();
    println!(
        "scenario {}: {} checks, {} failed; datasets: {}",
        r.scenario,
        r.checks.len(),
        r.failed_checks().len(),
        datasets.join(", ")
    );
    if r.passed {
        Ok(())
    } else {
        let failed: Vec<String> = r
            .failed_checks()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        Err(CliError::Invariant(format!(
            "invariant checks failed: {}",
            failed.join("; ")
        )))
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

async fn inspect(cfg: StackConfig, what: Inspect) -> Result<(), CliError> {
    let url = |s: &str| format!("http://{}:{}", cfg.host, cfg.ports.get(s).unwrap_or_default());
    match what {
        Inspect::Entities { entity_type, broker } => {
            let service = match broker {
                BrokerArg::Parking => stack::PARKING_BROKER,
                BrokerArg::Urban => stack::URBAN_BROKER,
            };
            let q = Query {
                entity_type,
                ..Default::default()
            };
            let entities = HttpBrokerClient::new(url(service)).query_entities(&q).await?;
            print_json(&serde_json::Value::Array(
                entities.iter().map(|e| e.simplified()).collect(),
            ));
        }
        Inspect::Datasets => {
            let found = HttpPortalClient::new(url(stack::ODP))
                .package_search("", &SearchFilters::default())
                .await?;
            print_json(&serde_json::to_value(found).expect("summaries serialize"));
        }
        Inspect::Dcat { name } => {
            let xml = HttpPortalClient::new(url(stack::ODP)).dcat_export(&name).await?;
            println!("{xml}");
        }
        Inspect::History { entity } => {
            let id = EntityId::parse(&entity).map_err(|e| CliError::Config(e.to_string()))?;
            let resp = reqwest::Client::new()
                .get(format!("{}/flow/history", url(stack::FLOW_ENGINE)))
                .query(&[("entityId", id.as_str())])
                .send()
                .await
                .map_err(|e| CliError::Service(format!("service unavailable: {}: {e}", stack::FLOW_ENGINE)))?;
            if !resp.status().is_success() {
                return Err(CliError::Service(format!(
                    "{} answered {}",
                    stack::FLOW_ENGINE,
                    resp.status()
                )));
            }
            let rows: serde_json::Value = resp
                .json()
                .await
                .map_err(|e| CliError::Service(format!("bad history response: {e}")))?;
            print_json(&rows);
        }
    }
    Ok(())
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Serve => serve(cfg).await,
        Command::Scenario { scenario: s, report } => scenario(cfg, s, report).await,
        Command::Inspect { what } => inspect(cfg, what).await,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| {
        eprintln!("warning: unknown log level {:?}, using warn", cli.log_level);
        tracing_subscriber::EnvFilter::new("warn")
    });
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
