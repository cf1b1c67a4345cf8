//! Command-line driver: covariance generation, scheme simulation, analytic
//! curves and the antenna-count sweep.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on runtime errors.

mod config;
mod run;
mod sweep;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::{load_covariance, ExperimentConfig};
use csifb::covariance::CovarianceFile;

#[derive(Parser)]
#[command(
    name = "csifb",
    about = "Compressive CSI feedback simulation for massive MIMO-OFDM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the channel covariance model from the configured statistics,
    /// store it as JSON and report its compression limits.
    GenCovariance {
        /// Experiment config (JSON); desk-scale defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "covariance.json")]
        out: PathBuf,
    },
    /// Run the multi-user downlink over the configured schemes and budgets
    /// and write one CSV row per (scheme, budget).
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Load the covariance model from a stored file instead of
        /// rebuilding it from the config.
        #[arg(long)]
        covariance: Option<PathBuf>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for drop-level parallelism (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Closed-form compression curves (no Monte Carlo) from a stored
    /// covariance model.
    Analyze {
        /// Stored covariance model (JSON).
        #[arg(long)]
        covariance: PathBuf,
        #[arg(long, default_value = "analytic.csv")]
        out: PathBuf,
        /// Noise power of the beamforming link for the BER bound.
        #[arg(long)]
        sigma2: f64,
        /// Comma-separated kept-count grid; defaults to 33 points over 0..=N.
        #[arg(long)]
        m_grid: Option<String>,
    },
    /// Spectral efficiency of the eigenbasis scheme per transmit-array size
    /// under per-user feedback byte budgets.
    SweepAntennas {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated budgets in bytes per user per subcarrier.
        #[arg(long)]
        budgets: String,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Distinguishes configuration problems (exit 2) from runtime failures
/// (exit 1).
enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn report(&self) -> ExitCode {
        match self {
            CliError::Config(e) => {
                eprintln!("configuration error: {e:#}");
                ExitCode::from(2)
            }
            CliError::Runtime(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

fn config_err<T>(r: anyhow::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Config)
}

fn runtime_err<T>(r: anyhow::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCovariance { config, out } => {
            let cfg = config_err(ExperimentConfig::load(config.as_deref()))?;
            config_err(cfg.validate())?;
            let model = config_err(cfg.covariance_model())?;
            let json = serde_json::to_string_pretty(&model.to_file())
                .expect("covariance file serializes");
            runtime_err(
                fs::write(&out, json).with_context(|| format!("writing {}", out.display())),
            )?;
            let ratios = model.distortion_free_ratio();
            println!("wrote covariance model to {}", out.display());
            println!(
                "n = {} (n_f = {}, n_t = {}, n_r = {})",
                model.n(),
                model.n_f(),
                model.n_t(),
                model.n_r()
            );
            println!(
                "rank = {} = {} (frequency) x {} (transmit) x {} (receive)",
                model.rank(),
                model.rank_f(),
                model.rank_t(),
                model.rank_r()
            );
            println!(
                "gamma* = {:.6} (gamma_f = {:.6}, gamma_t = {:.6}, gamma_r = {:.6})",
                ratios.gamma_star, ratios.gamma_f, ratios.gamma_t, ratios.gamma_r
            );
            let top: Vec<String> = model
                .eigenvalues()
                .iter()
                .take(8)
                .map(|v| format!("{v:.6}"))
                .collect();
            println!("top eigenvalues: {}", top.join(", "));
            Ok(())
        }
        Command::Simulate {
            config,
            covariance,
            out,
            seed,
            threads,
        } => {
            let cfg = config_err(ExperimentConfig::load(config.as_deref()))?;
            config_err(cfg.validate())?;
            let model = match covariance {
                Some(path) => Some(config_err(load_covariance(&path, &cfg))?),
                None => None,
            };
            let output = runtime_err(run::simulate(&cfg, model, seed, threads))?;
            runtime_err(
                fs::write(&out, &output.csv).with_context(|| format!("writing {}", out.display())),
            )?;
            let failed = output.records.iter().filter(|r| r.error.is_some()).count();
            println!(
                "wrote {} rows to {} ({} failed)",
                output.records.len(),
                out.display(),
                failed
            );
            Ok(())
        }
        Command::Analyze {
            covariance,
            out,
            sigma2,
            m_grid,
        } => {
            let text = config_err(
                fs::read_to_string(&covariance)
                    .with_context(|| format!("reading {}", covariance.display())),
            )?;
            let file: CovarianceFile = config_err(
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", covariance.display())),
            )?;
            let model = config_err(file.to_model().map_err(Into::into))?;
            if sigma2 <= 0.0 {
                return Err(CliError::Config(anyhow::anyhow!(
                    "--sigma2 must be positive"
                )));
            }
            let grid = match m_grid {
                Some(text) => config_err(parse_m_grid(&text, model.n()))?,
                None => {
                    let step = (model.n() / 32).max(1);
                    let mut g: Vec<usize> = (0..=model.n()).step_by(step).collect();
                    if *g.last().unwrap() != model.n() {
                        g.push(model.n());
                    }
                    g
                }
            };
            let csv = runtime_err(run::analyze(&model, &grid, sigma2))?;
            runtime_err(
                fs::write(&out, csv).with_context(|| format!("writing {}", out.display())),
            )?;
            println!("wrote {} rows to {}", grid.len(), out.display());
            Ok(())
        }
        Command::SweepAntennas {
            config,
            budgets,
            out,
            seed,
            threads,
        } => {
            let cfg = config_err(ExperimentConfig::load(config.as_deref()))?;
            let budgets = config_err(parse_budgets(&budgets))?;
            let (records, csv) = runtime_err(sweep::sweep_antennas(&cfg, &budgets, seed, threads))?;
            runtime_err(
                fs::write(&out, csv).with_context(|| format!("writing {}", out.display())),
            )?;
            println!("wrote {} rows to {}", records.len(), out.display());
            for &b in &budgets {
                if let Some(r) = records.iter().find(|r| r.budget_bytes == b && r.is_argmax) {
                    println!(
                        "budget {b} bytes/user/subcarrier: best n_t = {} ({}x{})",
                        r.side * r.side,
                        r.side,
                        r.side
                    );
                }
            }
            Ok(())
        }
    }
}

fn parse_m_grid(text: &str, n: usize) -> anyhow::Result<Vec<usize>> {
    let grid: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>().context("parsing --m-grid"))
        .collect::<anyhow::Result<_>>()?;
    if grid.iter().any(|&m| m > n) {
        anyhow::bail!("--m-grid entries must not exceed n = {n}");
    }
    Ok(grid)
}

fn parse_budgets(text: &str) -> anyhow::Result<Vec<f64>> {
    let budgets: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().context("parsing --budgets"))
        .collect::<anyhow::Result<_>>()?;
    if budgets.iter().any(|&b| b <= 0.0 || !b.is_finite()) {
        anyhow::bail!("budgets must be positive and finite");
    }
    Ok(budgets)
}
