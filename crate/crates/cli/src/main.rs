use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jungle::coupler::DaemonClient;
use jungle_cli::run::{run, serve_daemon, DaemonMode, RunOptions};
use jungle_cli::CliError;

#[derive(Parser)]
#[command(name = "jungle", version, about = "Run multi-physics simulations across a simulated grid")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Thread,
    Process,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario to completion.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Run the daemon in this process or as a separate one.
        #[arg(long, value_enum, default_value_t = Mode::Process)]
        daemon_mode: Mode,
        /// Progress line interval in steps (0 for none).
        #[arg(long, default_value_t = 10)]
        progress: u64,
    },
    /// Print the status document of a running daemon.
    Status { endpoint: String },
    /// Serve a scenario's resources until stopped (started by `run`).
    Daemon {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run {
            scenario,
            seed,
            steps,
            out_dir,
            daemon_mode,
            progress,
        } => {
            let daemon = match daemon_mode {
                Mode::Thread => DaemonMode::Thread,
                Mode::Process => match std::env::current_exe() {
                    Ok(exe) => DaemonMode::Process(exe),
                    Err(e) => return fail(&CliError::io("locating the executable", e)),
                },
            };
            let opts = RunOptions {
                seed,
                steps,
                daemon,
                progress_every: progress,
                ..RunOptions::new(scenario, out_dir)
            };
            match run(&opts, std::io::stdout()) {
                Ok(outcome) => {
                    if let Some(e) = &outcome.error {
                        return fail(e);
                    }
                    println!(
                        "done: {} steps, drift {:+.3e}, {} supernovae",
                        outcome.steps,
                        outcome.drift.unwrap_or(0.0),
                        outcome.supernovae
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Cmd::Status { endpoint } => match DaemonClient::connect(&endpoint).and_then(|c| c.status()) {
            Ok(s) => {
                println!("{}", s.to_json());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e.into()),
        },
        Cmd::Daemon { scenario, out_dir } => match serve_daemon(&scenario, &out_dir) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        },
    }
}
