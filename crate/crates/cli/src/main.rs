mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ufm_lab::UfmError;

use commands::{CalibrateConfig, CheckConfig, DEFAULT_DELTAS};
use config::RunConfig;

/// Experiments on the unconstrained feature model with label smoothing.
#[derive(Parser)]
#[command(name = "ufm-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(self) -> anyhow::Result<RunConfig> {
        RunConfig::load(&self.config)?.resolve(self.out, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form global minimizer.
    Solve(ConfigArgs),
    /// Gradient descent from a seeded start, with a trajectory CSV.
    Optimize(ConfigArgs),
    /// Analytic and numeric Hessian spectra at the minimizer.
    Spectrum(ConfigArgs),
    /// Closed-form and descent quantities over a list of smoothing levels.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// Comma-separated smoothing levels; overrides `sweep.deltas`.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Calibration of externally supplied logits.
    Calibrate {
        /// Headerless CSV, one sample's logits per line.
        #[arg(long)]
        logits: PathBuf,
        /// One 1-based class label per line.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = ufm_lab::calibration::DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        fit_temperature: bool,
        /// Leading fraction of samples used only to fit the temperature.
        #[arg(long, default_value_t = 0.0)]
        holdout_fraction: f64,
        #[arg(long, default_value = "ufm-out")]
        out: PathBuf,
    },
    /// Numerical witnesses for the theory behind the minimizer.
    Check {
        /// Relative perturbation of the optimal witnesses; nonzero values must fail.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<UfmError>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Solve(a) => commands::solve_cmd(&a.load()?)?,
        Command::Optimize(a) => commands::optimize_cmd(&a.load()?)?,
        Command::Spectrum(a) => commands::spectrum_cmd(&a.load()?)?,
        Command::Sweep { args, deltas } => {
            let mut cfg = args.load()?;
            let deltas = deltas
                .or_else(|| cfg.sweep.as_ref().map(|s| s.deltas.clone()))
                .unwrap_or_else(|| DEFAULT_DELTAS.to_vec());
            cfg.sweep = Some(config::SweepConfig {
                deltas: deltas.clone(),
            });
            let cfg = cfg.resolve(None, None)?;
            commands::sweep_cmd(&cfg, &deltas)?
        }
        Command::Calibrate {
            logits,
            labels,
            bins,
            fit_temperature,
            holdout_fraction,
            out,
        } => {
            let cc = CalibrateConfig {
                logits,
                labels,
                bins,
                fit_temperature,
                holdout_fraction,
            };
            commands::calibrate_cmd(&cc, &out)?
        }
        Command::Check { perturb, seed, out } => {
            let cc = CheckConfig {
                perturbation: perturb,
                seed,
            };
            return commands::check_cmd(&cc, out.as_deref());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
