use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use weakloop_cli::commands::{self, Failure};
use weakloop_cli::service::{self, AppState};
use weakloop_core::SessionStore;

/// Weak-control loop simulator and session server.
///
/// Log level comes from WEAKLOOP_LOG (e.g. `info`, `weakloop_cli=debug`).
#[derive(Debug, Parser)]
#[command(name = "weakloop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario file (JSON); the built-in reference scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace output; `.jsonl` selects JSON lines, anything else CSV.
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
    /// Reference case 1-4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    case: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its trace and manifest.
    Simulate(RunArgs),
    /// Same as `simulate --case 4`.
    Learn(RunArgs),
    /// Check the DC performance budget; exit 3 when it is violated.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        case: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        case: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Apply the nominal action when a session waits longer than this (milliseconds).
        #[arg(long)]
        auto_nominal_ms: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(args) => simulate(args, None),
        Command::Learn(args) => simulate(args, Some(4)),
        Command::Verify { config, case, seed } => {
            let cfg = commands::load_config(config.as_deref(), case, seed)?;
            match commands::verify(&cfg) {
                Ok(report) => {
                    println!("{report}");
                    Ok(())
                }
                Err(Failure::BudgetViolated(report)) => {
                    println!("{report}");
                    Err(Failure::BudgetViolated(report))
                }
                Err(e) => Err(e),
            }
        }
        Command::Serve { config, case, seed, port, host, auto_nominal_ms } => {
            let cfg = commands::load_config(config.as_deref(), case, seed)?;
            let store = SessionStore::new(auto_nominal_ms.map(Duration::from_millis));
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| Failure::Runtime(weakloop_core::Error::Io { path: "tokio runtime".into(), source: e }))?;
            runtime
                .block_on(service::serve(AppState::new(cfg, store), SocketAddr::new(host, port)))
                .map_err(|e| Failure::Runtime(weakloop_core::Error::Io { path: format!("{host}:{port}").into(), source: e }))
        }
    }
}

fn simulate(args: RunArgs, forced_case: Option<u8>) -> Result<(), Failure> {
    let cfg = commands::load_config(args.config.as_deref(), forced_case.or(args.case), args.seed)?;
    let manifest = commands::simulate(&cfg, &args.out)?;
    println!("{}", commands::summarize(&manifest));
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("WEAKLOOP_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("weakloop: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
