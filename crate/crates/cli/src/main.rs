use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ergolab::{load_source, parse_scenario, run_config, RunOptions, BUNDLED};

#[derive(Parser)]
#[command(name = "ergolab", version, about = "Ergodicity diagnostics for iterated function systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task of a scenario and write reports.
    Run {
        /// Config path or bundled scenario name.
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "ERGOLAB_THREADS")]
        threads: Option<usize>,
    },
    /// Parse and validate a config without running it.
    Validate { config: String },
    /// List the bundled scenarios.
    ListScenarios,
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed, threads } => {
            if let Some(t) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                    eprintln!("ergolab: cannot configure {t} threads: {e}");
                    return code(1);
                }
            }
            let outcome = run_config(&config, &out, &RunOptions { seed, threads });
            if let Some(e) = &outcome.error {
                eprintln!("ergolab: {e}");
            }
            if let Some(s) = &outcome.summary {
                for t in &s.tasks {
                    match &t.error {
                        None => println!("{:<14} {:?}  {}", t.task, t.status, t.verdict),
                        Some(e) => println!("{:<14} {:?}  {e}", t.task, t.status),
                    }
                }
                println!("reports written to {}", out.display());
            }
            code(outcome.exit_code)
        }
        Command::Validate { config } => {
            match load_source(&config)
                .and_then(|t| parse_scenario(&t))
                .and_then(|s| s.resolve())
            {
                Ok(r) => {
                    println!(
                        "{}: {} maps on {}, {} tasks",
                        r.scenario.name,
                        r.ifs.k(),
                        r.grid.space,
                        r.scenario.tasks.len()
                    );
                    code(0)
                }
                Err(e) => {
                    eprintln!("ergolab: {e}");
                    code(e.exit_code())
                }
            }
        }
        Command::ListScenarios => {
            for (name, text) in BUNDLED {
                let desc = parse_scenario(text).map(|s| s.description).unwrap_or_default();
                println!("{name:<22} {desc}");
            }
            code(0)
        }
    }
}
