use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nearopt_cli::{emit_plot_data, run_experiment, CliError, ExperimentConfig, RunOptions};
use nearopt_core::MODEL_NAMES;

#[derive(Parser)]
#[command(name = "nearopt", version, about = "Near-optimal stochastic control experiments")]
struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep and checks of an experiment config.
    Run { config: PathBuf },
    /// Turn a sweep.csv into per-controller plot data.
    Plotdata { sweep: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// List the registered models.
    ListModels,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let opts = RunOptions { seed: cli.seed, output_dir: cli.output_dir.clone(), jobs: cli.jobs };
            let outcome = run_experiment(&cfg, &opts)?;
            println!("wrote {}", outcome.output_dir.display());
            if outcome.cell_failures > 0 {
                eprintln!("{} sweep cell(s) failed; see diagnostics.json", outcome.cell_failures);
            }
            for c in &outcome.failed_checks {
                eprintln!("check failed: {c}");
            }
            Ok(outcome.exit_code())
        }
        Command::Plotdata { sweep } => {
            let dir = cli
                .output_dir
                .clone()
                .unwrap_or_else(|| sweep.parent().map(|p| p.join("plot")).unwrap_or_else(|| PathBuf::from("plot")));
            for p in emit_plot_data(sweep, &dir)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Validate { config } => {
            ExperimentConfig::load(config)?.validate()?;
            println!("ok");
            Ok(0)
        }
        Command::ListModels => {
            for (name, doc) in MODEL_NAMES {
                println!("{name:<10} {doc}");
            }
            Ok(0)
        }
    }
}
