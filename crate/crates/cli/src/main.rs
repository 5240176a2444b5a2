//! `octopus` — plug hardware in, get a live MCP tool endpoint out.
//!
//! Exit codes: 0 success, 1 stage or tool failure, 2 configuration error,
//! 3 endpoint unreachable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octopus_core::daemon::{shutdown_channel, Daemon, DaemonConfig};
use octopus_core::deploy::{DeployError, StateStore, PERCEPTS_FILE};
use octopus_core::events::{LogEvent, Severity};
use octopus_core::mcpserve::{ClientError, McpClient};
use octopus_core::pipeline::{bootstrap, PipelineConfig, PipelineError};

const EXIT_OK: u8 = 0;
const EXIT_STAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "octopus",
    version,
    about = "Bootstrap a hardware bus into a live MCP tool endpoint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe, identify, generate tools, and serve the verified endpoint.
    Up(UpArgs),
    /// Everything `up` does, then keep watching, healing, and perceiving.
    Daemon(DaemonArgs),
    /// Report persisted state and/or endpoint health.
    Status(StatusArgs),
    /// Call one tool on a running endpoint.
    Call(CallArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Drive the built-in simulated bus (the only bus in this build).
    #[arg(long)]
    simulate: bool,
    /// Rig description JSON for the simulated bus.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Directory holding the stage spec documents.
    #[arg(long, default_value = "specs")]
    specs_dir: PathBuf,
    /// Device database JSON; built-in copy when omitted.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Agent backing the pipeline: "stub" or "remote".
    #[arg(long, default_value = "stub")]
    agent: String,
    /// Script file for the stub agent; built-in script when omitted.
    #[arg(long)]
    agent_script: Option<PathBuf>,
    #[arg(long, default_value_t = 8300)]
    port: u16,
    /// Maximum number of generated tools.
    #[arg(long, default_value_t = octopus_core::identify::DEFAULT_CAP)]
    cap: usize,
    /// Capabilities below this confidence are dropped.
    #[arg(long, default_value_t = octopus_core::identify::DEFAULT_CONFIDENCE_THRESHOLD)]
    confidence_threshold: f64,
    /// Serve even when dependency preflight finds gaps.
    #[arg(long)]
    skip_deps: bool,
    /// Directory for persisted state (inventory, identification, manifest).
    #[arg(long)]
    state_dir: Option<PathBuf>,
}

impl PipelineArgs {
    fn to_config(&self) -> PipelineConfig {
        PipelineConfig {
            simulate: self.simulate,
            rig: self.rig.clone(),
            specs_dir: self.specs_dir.clone(),
            db: self.db.clone(),
            agent: self.agent.clone(),
            agent_script: self.agent_script.clone(),
            cap: self.cap,
            confidence_threshold: self.confidence_threshold,
            port: self.port,
            skip_deps: self.skip_deps,
            state_dir: self.state_dir.clone(),
        }
    }
}

#[derive(Args)]
struct UpArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Keep serving until interrupted instead of exiting after verification.
    #[arg(long)]
    stay: bool,
}

#[derive(Args)]
struct DaemonArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Seconds between perceive cycles.
    #[arg(long, default_value_t = 30)]
    perceive_interval: u64,
    /// Milliseconds of quiet before an error window is diagnosed.
    #[arg(long, default_value_t = octopus_core::daemon::DEFAULT_QUIET_WINDOW_MS)]
    quiet_window_ms: u64,
}

#[derive(Args)]
struct StatusArgs {
    /// Directory holding persisted state.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Base URL of a running endpoint, e.g. http://127.0.0.1:8300
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct CallArgs {
    /// Tool name as listed by tools/list.
    tool: String,
    /// Tool arguments as a JSON object.
    #[arg(long, default_value = "{}")]
    args: String,
    /// Base URL of the running endpoint.
    #[arg(long)]
    endpoint: String,
    /// Write returned frames as PNG files into this directory.
    #[arg(long)]
    save_frames: Option<PathBuf>,
}

fn print_event(event: &LogEvent) {
    let tag = match event.severity {
        Severity::Info => "info",
        Severity::Warn => "warn",
        Severity::Error => "error",
    };
    println!("[{tag}] {}", event.text);
}

fn pipeline_exit(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Spec(_) | PipelineError::Rig(_) | PipelineError::RealHardwareUnsupported => {
            EXIT_CONFIG
        }
        PipelineError::Agent(e) if e.to_string().contains("unknown agent kind") => EXIT_CONFIG,
        PipelineError::Deploy(DeployError::Endpoint(_)) => EXIT_UNREACHABLE,
        _ => EXIT_STAGE,
    }
}

async fn run_up(args: UpArgs) -> u8 {
    let config = args.pipeline.to_config();
    let boot = match bootstrap(&config).await {
        Ok(boot) => boot,
        Err(e) => {
            eprintln!("error: {e}");
            return pipeline_exit(&e);
        }
    };
    for event in &boot.events {
        print_event(event);
    }
    println!(
        "endpoint {} serving {} tool(s), manifest {}",
        boot.report.endpoint, boot.report.tool_count, boot.report.manifest_hash
    );
    if args.stay {
        println!("serving until interrupted (--stay)");
        let _ = tokio::signal::ctrl_c().await;
        boot.server.shutdown();
    }
    EXIT_OK
}

async fn run_daemon(args: DaemonArgs) -> u8 {
    let config = args.pipeline.to_config();
    let boot = match bootstrap(&config).await {
        Ok(boot) => boot,
        Err(e) => {
            eprintln!("error: {e}");
            return pipeline_exit(&e);
        }
    };
    for event in &boot.events {
        print_event(event);
    }
    println!(
        "endpoint {} serving {} tool(s); daemon watching",
        boot.report.endpoint, boot.report.tool_count
    );
    let daemon_config = DaemonConfig {
        perceive_interval_ms: args.perceive_interval.saturating_mul(1000),
        quiet_window_ms: args.quiet_window_ms,
        ..DaemonConfig::default()
    };
    let daemon = Daemon::new(boot.daemon_seed(daemon_config));
    let (stop_tx, stop_rx) = shutdown_channel();
    let runner = tokio::spawn(daemon.run(stop_rx));
    let _ = tokio::signal::ctrl_c().await;
    let _ = stop_tx.send(true);
    let _ = runner.await;
    boot.server.shutdown();
    EXIT_OK
}

async fn run_status(args: StatusArgs) -> u8 {
    if args.state_dir.is_none() && args.endpoint.is_none() {
        eprintln!("error: pass --state-dir and/or --endpoint");
        return EXIT_CONFIG;
    }
    let mut code = EXIT_OK;
    if let Some(dir) = &args.state_dir {
        let store = StateStore::new(dir);
        match (store.load_inventory(), store.load_manifest()) {
            (Ok(inventory), Ok(manifest)) => {
                println!(
                    "state {}: {} device(s), {} tool(s), manifest {}",
                    dir.display(),
                    inventory.devices.len(),
                    manifest.tools.len(),
                    manifest.manifest_hash
                );
                for device in &inventory.devices {
                    println!("  device {} {}", device.stable_key, device.description);
                }
                let percepts: Vec<octopus_core::daemon::PerceptSummary> =
                    store.load_json(PERCEPTS_FILE).unwrap_or_default();
                if let Some(latest) = percepts.last() {
                    println!("  percept [{}] {}", latest.at, latest.caption);
                }
            }
            (inventory, manifest) => {
                for err in [inventory.err(), manifest.err()].into_iter().flatten() {
                    eprintln!("error: {err}");
                }
                code = EXIT_STAGE;
            }
        }
    }
    if let Some(endpoint) = &args.endpoint {
        let client = McpClient::new(endpoint);
        match client.healthz().await {
            Ok(health) => println!(
                "endpoint {endpoint}: status {}, manifest {}, up {}s",
                health["status"].as_str().unwrap_or("?"),
                health["manifest_hash"].as_str().unwrap_or("?"),
                health["uptime_s"]
            ),
            Err(e) => {
                eprintln!("error: endpoint unreachable: {e}");
                code = EXIT_UNREACHABLE;
            }
        }
    }
    code
}

async fn run_call(args: CallArgs) -> u8 {
    let arguments: serde_json::Value = match serde_json::from_str(&args.args) {
        Ok(serde_json::Value::Object(map)) => serde_json::Value::Object(map),
        Ok(_) => {
            eprintln!("error: --args must be a JSON object");
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("error: --args is not valid JSON: {e}");
            return EXIT_CONFIG;
        }
    };
    let client = McpClient::new(&args.endpoint);
    if let Err(e) = client.initialize().await {
        eprintln!("error: endpoint unreachable: {e}");
        return EXIT_UNREACHABLE;
    }
    let result = match client.tools_call(&args.tool, arguments).await {
        Ok(result) => result,
        Err(ClientError::Rpc { code, message }) => {
            eprintln!("error: rpc {code}: {message}");
            return EXIT_STAGE;
        }
        Err(e) => {
            eprintln!("error: endpoint unreachable: {e}");
            return EXIT_UNREACHABLE;
        }
    };
    if result.is_error {
        eprintln!(
            "tool error: {}",
            result.text().unwrap_or_else(|| "no detail".to_string())
        );
        return EXIT_STAGE;
    }
    let frames = result.images();
    if frames.is_empty() {
        println!("{}", result.text().unwrap_or_else(|| "ok".to_string()));
    } else if let Some(dir) = &args.save_frames {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("error: {}: {e}", dir.display());
            return EXIT_STAGE;
        }
        for (i, frame) in frames.iter().enumerate() {
            let path = dir.join(format!("frame_{i}.png"));
            if let Err(e) = std::fs::write(&path, frame) {
                eprintln!("error: {}: {e}", path.display());
                return EXIT_STAGE;
            }
            println!("wrote {}", path.display());
        }
    } else {
        println!(
            "{} frame(s) returned; pass --save-frames DIR to keep them",
            frames.len()
        );
    }
    EXIT_OK
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Up(args) => run_up(args).await,
        Command::Daemon(args) => run_daemon(args).await,
        Command::Status(args) => run_status(args).await,
        Command::Call(args) => run_call(args).await,
    };
    ExitCode::from(code)
}
