use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use fluxlab::runner::{self, RunOverrides, EXIT_CONFIG, EXIT_OK};

#[derive(Parser)]
#[command(name = "fluxlab", version, about = "Pathwise flux experiments for transient diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of simulated paths.
        #[arg(long)]
        paths: Option<u64>,
        /// Worker threads (results do not depend on it).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Validate a config file and print it with defaults filled in.
    Validate { config: PathBuf },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match runner::load_config(&config) {
            Ok(cfg) => {
                print!("{}", cfg.to_toml());
                exit(EXIT_OK)
            }
            Err(e) => {
                eprintln!("{e}");
                exit(EXIT_CONFIG)
            }
        },
        Command::Run {
            config,
            seed,
            out,
            paths,
            threads,
        } => {
            let overrides = RunOverrides {
                seed,
                out,
                paths,
                threads,
            };
            let started = Instant::now();
            match runner::run_file(&config, &overrides) {
                Ok(report) => {
                    print!("{}", report.render());
                    for f in &report.files {
                        eprintln!("wrote {}", f.display());
                    }
                    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
                    exit(report.exit_code())
                }
                Err(e) => {
                    eprintln!("fluxlab: {e}");
                    exit(e.exit_code())
                }
            }
        }
    }
}
