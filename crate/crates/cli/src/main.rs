use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psar::par::Execution;
use psar_cli::archive::ERROR;
use psar_cli::commands::{
    cmd_diagnose, cmd_fit, cmd_forecast, cmd_simulate, DiagnoseArgs, FitArgs, ForecastArgs,
};
use psar_cli::CliError;

#[derive(Parser)]
#[command(name = "psar", version, about = "Penalised-spline regression with autoregressive errors")]
struct Cli {
    /// Run chains, draws and edf traces on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic hourly dataset with known components.
    Simulate {
        /// Number of 24-step cycles.
        #[arg(long, default_value_t = 100)]
        cycles: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model and write a run archive.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Archive directory; replaced if it exists.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `model.mcmc.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `model.mcmc.chains`.
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Forecast rows that follow the archived data.
    Forecast {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        future_data: PathBuf,
        /// Refit-and-forecast over archived plus future data on the
        /// configured schedule.
        #[arg(long)]
        rolling: bool,
    },
    /// Write edf, DIC, ACF, residual covariance and marginal-effect tables.
    Diagnose {
        #[arg(long)]
        archive: PathBuf,
        /// Only this term's marginal effect.
        #[arg(long)]
        term: Option<String>,
        /// Grid points per covariate.
        #[arg(long, default_value_t = 50)]
        grid: usize,
        /// Regression targets in the residual-covariance window.
        #[arg(long, default_value_t = 200)]
        window: usize,
    },
}

fn report(err: &CliError, dir: Option<&Path>) {
    let json = serde_json::to_string_pretty(&err.record()).expect("error record serializes");
    eprintln!("{json}");
    if let Some(d) = dir {
        if std::fs::create_dir_all(d).is_ok() {
            let _ = std::fs::write(d.join(ERROR), &json);
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Auto };
    let (result, dir) = match cli.command {
        Command::Simulate { cycles, seed, out } => (cmd_simulate(cycles, seed, &out), None),
        Command::Fit {
            config,
            data,
            out,
            seed,
            chains,
        } => {
            let args = FitArgs {
                config,
                data,
                out,
                seed,
                chains,
            };
            (cmd_fit(&args, exec).map(|_| ()), Some(args.out))
        }
        Command::Forecast {
            archive,
            future_data,
            rolling,
        } => {
            let args = ForecastArgs {
                archive,
                future_data,
                rolling,
            };
            let r = cmd_forecast(&args, exec).map(|o| {
                for (lead, c) in &o.calibration {
                    eprintln!(
                        "lead {lead}: n={} coverage={:.3} KS p={:.3} sharpness={:.4}",
                        c.n, c.coverage, c.ks_p_value, c.mean_sharpness
                    );
                }
            });
            (r, args.archive.is_dir().then_some(args.archive))
        }
        Command::Diagnose {
            archive,
            term,
            grid,
            window,
        } => {
            let args = DiagnoseArgs {
                archive,
                term,
                grid,
                window,
            };
            let r = cmd_diagnose(&args, exec).map(|o| {
                for t in &o.edf.terms {
                    eprintln!("edf {}: {:.2}", t.name, t.summary.mean);
                }
                eprintln!("DIC {:.2}, p_D {:.2}", o.dic.dic, o.dic.p_d);
            });
            (r, args.archive.is_dir().then_some(args.archive))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, dir.as_deref());
            ExitCode::FAILURE
        }
    }
}
