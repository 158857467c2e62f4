use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bcp_distill::synth::{bayes_risk, oracle_risk, write_dataset_csv};
use bcp_distill::verify::{run_suite, Level};
use bcp_distill_cli::report::cmd_report;
use bcp_distill_cli::run::{build_dataset, cmd_train, write_dataset_file};
use bcp_distill_cli::sweep::cmd_sweep;
use bcp_distill_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "bcp-distill", version, about = "SGD with noisy and soft supervision on synthetic Gaussian-mixture tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task's dataset and print its Bayes risk.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV copy next to the binary file.
        #[arg(long)]
        csv: bool,
    },
    /// Train one student; writes trace.csv, params.ckpt and summary.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset written by `gen`; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the config's [sweep] block; writes summary.csv and per-run traces.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "BCP_DISTILL_WORKERS")]
        workers: Option<usize>,
    },
    /// Run the self-check suite.
    Verify {
        #[arg(long, value_enum, default_value = "quick")]
        level: LevelArg,
    },
    /// Render SVG plots and a markdown summary from run or sweep directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the default configuration.
    PrintDefaults,
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { config, out, csv } => {
            let config = ExperimentConfig::load(&config)?;
            let dataset = build_dataset(&config.task)?;
            write_dataset_file(&dataset, &out)?;
            if csv {
                let path = out.with_extension("csv");
                let file = std::fs::File::create(&path).map_err(|source| CliError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                write_dataset_csv(&dataset, std::io::BufWriter::new(file))?;
            }
            println!("samples: {}", dataset.len());
            println!("bayes_risk: {}", bayes_risk(&dataset));
            println!("oracle_risk: {}", oracle_risk(&dataset));
        }
        Command::Train { config, data, out } => {
            let config = ExperimentConfig::load(&config)?;
            let metrics = cmd_train(&config, data.as_deref(), &out)?;
            println!("bayes_risk: {}", metrics.bayes_risk);
            println!("oracle_risk: {}", metrics.oracle_risk);
            println!("final_gen_error: {}", metrics.final_gen_error);
            println!("final_accuracy: {}", metrics.final_accuracy);
            if let Some(gap) = metrics.avg_gap {
                println!("avg_gap: {gap}");
            }
        }
        Command::Sweep {
            config,
            data,
            out,
            workers,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let points = cmd_sweep(&config, data.as_deref(), &out, workers)?;
            for p in &points {
                println!(
                    "value {}: avg_gap {} (sd {}), sigma_L {}, failed {}/{}",
                    p.value, p.avg_gap.mean, p.avg_gap.sd, p.sigma_l.mean, p.failed, p.runs
                );
            }
        }
        Command::Verify { level } => {
            let level = match level {
                LevelArg::Quick => Level::Quick,
                LevelArg::Full => Level::Full,
            };
            let results = run_suite(level)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Err(CliError::Verification(failed));
            }
        }
        Command::Report { out, runs } => {
            let summary = cmd_report(&runs, &out)?;
            for fit in &summary.fits {
                println!("{}: c = {}, R^2 = {}", fit.label, fit.fit.c, fit.fit.r_squared);
            }
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
        }
        Command::PrintDefaults => print!("{}", ExperimentConfig::paper_defaults().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
