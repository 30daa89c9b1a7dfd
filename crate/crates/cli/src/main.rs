mod analyze_cmd;
mod config;
mod error;
mod manifest;
mod node_cmd;
mod sim_cmd;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use error::CliError;

/// Durable decentralized storage: simulator, analytical calculator and a
/// local node runtime.
#[derive(Debug, Parser)]
#[command(name = "entropy", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Long-horizon simulations; each writes a CSV and a JSON manifest.
    Sim {
        #[command(subcommand)]
        cmd: sim_cmd::SimCommand,
    },
    /// Analytical durability bounds, with optional Monte Carlo checks.
    Analyze {
        #[command(subcommand)]
        cmd: analyze_cmd::AnalyzeCommand,
    },
    /// Local deployment: init, run, store, query, evict, view.
    Node {
        #[command(subcommand)]
        cmd: node_cmd::NodeCommand,
    },
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Sim { cmd } => Ok(sim_cmd::run(cmd)?.join("\n")),
        Command::Analyze { cmd } => analyze_cmd::run(cmd).map(|s| s.trim_end().to_string()),
        Command::Node { cmd } => node_cmd::run(cmd),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.json_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match dispatch(cli.cmd) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
