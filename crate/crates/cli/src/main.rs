mod args;
mod commands;
mod svg;

use std::process::ExitCode;

use clap::Parser;

use args::Command;

#[derive(Debug, Parser)]
#[command(name = "regbase", version, about = "Regression-based baseline correction for ERP data")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<regbase::Error> for Failure {
    fn from(e: regbase::Error) -> Self {
        use regbase::Error as E;
        match e {
            E::Formula(_)
            | E::UnknownColumn(_)
            | E::EmptyWindow { .. }
            | E::Invalid(_)
            | E::EmptyRoi(_)
            | E::NotNested(_)
            | E::MissingColumns { .. }
            | E::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
