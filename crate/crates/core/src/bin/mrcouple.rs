use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mrcouple::config::{
    check_conservation, check_energy, load_config, prepare, run_and_write, run_convergence, ExperimentConfig,
    ReferenceChoice, TargetChoice,
};
use mrcouple::Error;

#[derive(Parser)]
#[command(
    name = "mrcouple",
    version,
    about = "Multirate coupling-window integrator for interface-coupled advection-diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config (a single simulation by default).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.directory`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temporal convergence study against an overkill reference solve.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Levels solved in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Exit 0 iff the property holds, 1 otherwise.
    Check {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Conservation,
    Energy,
}

fn init_logging() {
    let level = std::env::var("MRCOUPLE_LOG").unwrap_or_else(|_| "error".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn convergence(
    prepared: &mrcouple::config::Prepared,
    levels: usize,
    target: TargetChoice,
    reference: ReferenceChoice,
    jobs: usize,
    out: &std::path::Path,
) -> Result<(), Error> {
    let table = run_convergence(prepared, levels, target, reference, jobs)?;
    fs::create_dir_all(out)?;
    table.write_csv(BufWriter::new(fs::File::create(out.join("rates.csv"))?))?;
    table.write_csv(std::io::stdout())?;
    println!("observed rate: {:.4}", table.observed_rate);
    Ok(())
}

fn verdict(outcome: mrcouple::config::CheckOutcome) -> ExitCode {
    if outcome.holds {
        println!("PASS {}", outcome.message);
        ExitCode::SUCCESS
    } else {
        println!("FAIL {}", outcome.message);
        ExitCode::from(1)
    }
}

fn execute(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.directory.clone());
            let prepared = prepare(&cfg)?;
            match cfg.experiment {
                ExperimentConfig::Run => {
                    let s = run_and_write(&prepared, &out)?;
                    println!(
                        "{} windows of {}: energy {:.6e} -> {:.6e}; wrote {}",
                        s.windows,
                        s.scheme,
                        s.initial_energy,
                        s.final_energy,
                        out.join("trajectory.csv").display()
                    );
                    Ok(ExitCode::SUCCESS)
                }
                ExperimentConfig::Convergence {
                    levels,
                    target,
                    reference,
                } => {
                    convergence(&prepared, levels, target, reference, 1, &out)?;
                    Ok(ExitCode::SUCCESS)
                }
                ExperimentConfig::Conservation => Ok(verdict(check_conservation(&prepared)?)),
                ExperimentConfig::Energy => Ok(verdict(check_energy(&prepared)?)),
            }
        }
        Command::Convergence {
            config,
            levels,
            out,
            jobs,
        } => {
            let cfg = load_config(&config)?;
            if levels < 3 {
                return Err(Error::Config(vec![format!(
                    "--levels must be at least 3, got {levels}"
                )]));
            }
            let out = out.unwrap_or_else(|| cfg.output.directory.clone());
            let (target, reference) = match cfg.experiment {
                ExperimentConfig::Convergence {
                    target, reference, ..
                } => (target, reference),
                _ => Default::default(),
            };
            let prepared = prepare(&cfg)?;
            convergence(&prepared, levels, target, reference, jobs, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { suite, config } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            Ok(verdict(match suite {
                Suite::Conservation => check_conservation(&prepared)?,
                Suite::Energy => check_energy(&prepared)?,
            }))
        }
    }
}
