use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtnetopt::experiment::{analyze, emit_outputs, oracle_report, run_scenario, Config, ConfigError, ExperimentError, Grid};

#[derive(Parser)]
#[command(name = "mtnetopt", version, about = "Two-timescale power and rate control on mobile relay networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured schemes and write CSV, JSON and SVG outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Sweep one key, e.g. `a_H=1,10,50`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Estimate stability parameters and print the verdict and error bound.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the outer target and inner optimum at the first frame.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf, seeds: Option<&str>) -> Result<Config, ExperimentError> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seeds {
        cfg.set("experiment", "seeds", s, std::path::Path::new("."))?;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Prints a JSON report; a closed stdout (e.g. piped into `head`) is not an error.
fn print_json<T: serde::Serialize>(v: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, out, seeds, grid } => {
            let cfg = load(&config, seeds.as_deref())?;
            let grid = grid.as_deref().map(Grid::parse).transpose().map_err(ConfigError::from)?;
            let result = run_scenario(&cfg, grid.as_ref())?;
            for cell in &result.cells {
                let a = &cell.aggregate;
                let at = cell.grid_value.map(|v| format!(" {}={v}", grid.as_ref().map_or("", |g| g.key.as_str()))).unwrap_or_default();
                println!(
                    "{}{at}: P_out {:.4} ± {:.4}  throughput {:.4}  utility {:.4}  e_x {:.4e}  e_y {:.4e}",
                    cell.scheme, a.p_out.mean, a.p_out.ci95, a.throughput.mean, a.utility.mean, a.e_x.mean, a.e_y.mean
                );
            }
            let files = emit_outputs(&result, &out)?;
            eprintln!("wrote {} files under {}", files.len(), out.display());
        }
        Command::Analyze { config } => print_json(&analyze(&load(&config, None)?)?),
        Command::Oracle { config } => print_json(&oracle_report(&load(&config, None)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
