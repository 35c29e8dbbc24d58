use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stoch_torus::config::RunConfig;
use stoch_torus::scenario;
use stoch_torus::Error;

#[derive(Parser)]
#[command(name = "stoch-torus", version, about = "Coupled stochastic flows on the 2-torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run {
        config: PathBuf,
        /// Override `flow.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print derived constants of a config without running it.
    Describe { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::from_path(path).map_err(|e| fail(&e))
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Io(_) => ExitCode::FAILURE,
        _ => ExitCode::from(EXIT_CONFIG),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Describe { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match scenario::describe(&cfg) {
                Ok(d) => {
                    println!("{d}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Run { config, seed, out } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg.flow.seed = s;
            }
            if let Some(o) = out {
                cfg.output.dir = o.to_string_lossy().into_owned();
            }
            let dir = PathBuf::from(&cfg.output.dir);
            match scenario::run(&cfg, &dir) {
                Ok(outcome) => {
                    println!("{}", outcome.summary);
                    for a in &outcome.artifacts {
                        println!("wrote {}", a.display());
                    }
                    if outcome.violations > 0 {
                        eprintln!("invariant violations: {}", outcome.violations);
                        eprintln!("{}", outcome.report_json);
                        ExitCode::from(EXIT_VIOLATION)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(&e),
            }
        }
    }
}
