use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tdlab_cli::{check_instance, parse_config_file, run_experiment, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "tdlab", about = "TD(0) experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory, overriding output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker thread cap.
        #[arg(long)]
        threads: Option<usize>,
        /// Emit SVG plots next to results.csv.
        #[arg(long)]
        plot: bool,
    },
    /// Re-derive a stored instance.json and report disagreements.
    CheckInstance { path: PathBuf },
    /// Print version information.
    Version,
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error [{}]: {e}", e.category());
    ExitCode::from(e.exit_code() as u8)
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
    match cli.command {
        Command::Run { config, out, threads, plot } => {
            let cfg = match parse_config_file(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_experiment(&cfg, &RunOptions { out, threads, plot }) {
                Ok(summary) => {
                    println!("results: {}", summary.results.display());
                    for img in &summary.images {
                        println!("plot: {}", img.display());
                    }
                    for f in &summary.failures {
                        eprintln!("check failed: {f}");
                    }
                    ExitCode::from(summary.exit_code() as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::CheckInstance { path } => match check_instance(&path) {
            Ok(problems) if problems.is_empty() => {
                println!("ok: {}", path.display());
                ExitCode::SUCCESS
            }
            Ok(problems) => {
                for p in &problems {
                    eprintln!("problem: {p}");
                }
                ExitCode::from(4)
            }
            Err(e) => fail(e),
        },
        Command::Version => {
            println!("tdlab {} (core {})", env!("CARGO_PKG_VERSION"), tdlab_core::VERSION);
            ExitCode::SUCCESS
        }
    }
}
