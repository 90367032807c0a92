//! `nasdip`: evolutionary architecture search for deep-image-prior
//! restoration. Exit codes: 0 success, 1 run failure, 2 usage error.

/// Prints a line to stdout, ignoring a closed pipe instead of panicking.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

mod config;
mod decode;
mod imageio;
mod report;
mod search;
mod train;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use nasdip::fleet::{Worker, WorkerOptions, DEFAULT_JOB_TIMEOUT};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, paths or inputs; exit code 2.
    Usage(String),
    /// The command started but could not finish; exit code 1.
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("json") + "\n"))
}

#[derive(Debug, Parser)]
#[command(name = "nasdip", version, about = "Evolutionary architecture search for deep-image-prior restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search for an architecture that restores an image.
    Search(search::SearchArgs),
    /// Train one architecture and write the restored image.
    Train(train::TrainArgs),
    /// Print the architecture encoded by a genome.
    Decode(decode::DecodeArgs),
    /// Serve evaluation jobs to a remote search.
    Worker(WorkerArgs),
    /// Rebuild the CSV and HTML reports of a run directory.
    Report(report::ReportArgs),
}

#[derive(Debug, Args)]
struct WorkerArgs {
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "0.0.0.0:7878")]
    listen: String,
    /// Jobs evaluated concurrently per connection.
    #[arg(long, default_value_t = 1)]
    slots: usize,
    /// Per-job time limit in seconds.
    #[arg(long, default_value_t = DEFAULT_JOB_TIMEOUT.as_secs())]
    job_timeout: u64,
    /// Exit after serving this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
    /// Write the bound address to this file once listening.
    #[arg(long)]
    addr_file: Option<PathBuf>,
}

fn worker(args: &WorkerArgs) -> Result<(), CliError> {
    let addr = config::resolve_addr(&args.listen)?;
    let opts = WorkerOptions {
        slots: args.slots.max(1),
        job_timeout: Duration::from_secs(args.job_timeout),
        max_connections: args.max_connections,
        ..WorkerOptions::default()
    };
    let w = Worker::spawn(addr, opts).map_err(|e| CliError::Run(format!("cannot listen on {addr}: {e}")))?;
    let bound = w.local_addr();
    say!("listening on {bound}");
    let _ = std::io::stdout().flush();
    if let Some(path) = &args.addr_file {
        write_text(path, &format!("{bound}\n"))?;
    }
    w.join();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Search(a) => search::run(a),
        Command::Train(a) => train::run(a),
        Command::Decode(a) => decode::run(a),
        Command::Worker(a) => worker(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
