use std::net::SocketAddr;
use std::process::ExitCode;

use clap::Parser;
use complyscan::cli::{load_config, run_command, Cli, Command, ServeArgs};
use complyscan::error::CliError;
use complyscan::service::{serve, AppState};
use complyscan_core::config::AppConfig;
use complyscan_core::store::ArtifactStore;
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|config| match &cli.command {
        Command::Serve(args) => run_service(args, config),
        other => run_command(other, &config).map(|summary| println!("{summary}")),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}

fn run_service(args: &ServeArgs, config: AppConfig) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| CliError::new("usage", format!("bad listen address: {e}")))?;
    let store = ArtifactStore::open(&args.store).map_err(|e| CliError::file(&args.store, e))?;
    let state = AppState::new(store, config).map_err(|e| CliError::file(&args.store, e))?;
    let runtime =
        tokio::runtime::Runtime::new().map_err(|e| CliError::new("runtime", e.to_string()))?;
    runtime
        .block_on(serve(addr, state))
        .map_err(|e| CliError::new("serve", e.to_string()))
}
