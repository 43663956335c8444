use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use droidmeter::app::{self, Config, EXIT_FATAL};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "droidmeter", version, about = "Measure embedded Web pages in Android apps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore the app and write the transition model and replay scripts.
    Explore {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay one script and measure the page it leads to.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: PathBuf,
    },
    /// Replay and measure every script in the output folder.
    Measure {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        all_scripts: bool,
    },
}

fn load(path: &Path) -> Option<Config> {
    match Config::load(path) {
        Ok(c) => Some(c.with_env()),
        Err(e) => {
            eprintln!("error: {e}");
            None
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handler = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received, saving results");
    });
    if let Err(e) = handler {
        eprintln!("warning: cannot install interrupt handler: {e}");
    }

    let code = match cli.command {
        Command::Explore { config } => load(&config).map_or(EXIT_FATAL, |c| app::run_explore(&c, stop)),
        Command::Replay { config, script } => {
            load(&config).map_or(EXIT_FATAL, |c| app::run_replay(&c, &script))
        }
        Command::Measure { config, .. } => load(&config).map_or(EXIT_FATAL, |c| app::run_measure(&c)),
    };
    ExitCode::from(code as u8)
}
