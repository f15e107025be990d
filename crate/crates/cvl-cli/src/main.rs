//! Command-line driver: each subcommand is one pipeline stage reading the
//! previous stage's files and writing its own, so every intermediate is
//! inspectable and every stage individually rerunnable.

mod stages;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cvl_core::pipeline::{Measure, RunConfig};

#[derive(Parser)]
#[command(name = "cvl", version, about = "Characteristic-vector linkage pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (also settable via CVL_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker thread cap; results are independent of this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Restrict the run to one measure (euclidean or qcml).
    #[arg(long, global = true)]
    measure: Option<String>,

    /// Override the synthetic firm count.
    #[arg(long, global = true)]
    firms: Option<usize>,

    /// Override the synthetic date count.
    #[arg(long, global = true)]
    dates: Option<usize>,

    /// Override the lead-lag strength of the generator.
    #[arg(long, global = true)]
    lead_lag_strength: Option<f64>,

    /// Override the ensemble size.
    #[arg(long, global = true)]
    ensemble_size: Option<usize>,

    /// Override the training epoch count.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Override the quantum-similarity bandwidth (skips calibration).
    #[arg(long, global = true)]
    gamma_qcml: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic panel files.
    Generate,
    /// Preprocess the panel and attach the training target.
    Preprocess,
    /// Train the model ensemble and write checkpoints.
    Train,
    /// Compute per-date similarity matrices (calibrating gamma if needed).
    Similarity,
    /// Build and normalize the spillover signals.
    Signal,
    /// Run the constrained Markowitz evaluation and write report tables.
    Backtest,
    /// Run every stage in sequence.
    Pipeline,
    /// Pretty-print the report tables.
    Report,
}

impl Cli {
    fn load_config(&self) -> Result<RunConfig> {
        let mut config: RunConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(measure) = &self.measure {
            config.measures = vec![match measure.as_str() {
                "euclidean" => Measure::Euclidean,
                "qcml" => Measure::Qcml,
                other => anyhow::bail!("unknown measure '{other}' (expected euclidean or qcml)"),
            }];
        }
        if let Some(firms) = self.firms {
            config.synthetic.firms = firms;
        }
        if let Some(dates) = self.dates {
            config.synthetic.dates = dates;
        }
        if let Some(strength) = self.lead_lag_strength {
            config.synthetic.lead_lag_strength = strength;
        }
        if let Some(n) = self.ensemble_size {
            config.training.ensemble_size = n;
        }
        if let Some(n) = self.epochs {
            config.training.epochs = n;
        }
        if let Some(g) = self.gamma_qcml {
            config.gamma_qcml = Some(g);
        }
        Ok(config)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("CVL_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing thread pool")?;
    }
    let config = cli.load_config()?;
    config.validate()?;
    for warning in config.training.warnings() {
        eprintln!("warning: {warning}");
    }
    let out = cli.out_dir();
    match cli.command {
        Command::Generate => stages::generate(&config, &out)?,
        Command::Preprocess => stages::preprocess(&config, &out)?,
        Command::Train => stages::train(&config, &out)?,
        Command::Similarity => stages::similarity(&config, &out)?,
        Command::Signal => stages::signal(&config, &out)?,
        Command::Backtest => stages::backtest(&config, &out)?,
        Command::Pipeline => {
            stages::generate(&config, &out)?;
            stages::preprocess(&config, &out)?;
            stages::train(&config, &out)?;
            stages::similarity(&config, &out)?;
            stages::signal(&config, &out)?;
            stages::backtest(&config, &out)?;
        }
        Command::Report => stages::report(&config, &out)?,
    }
    Ok(())
}
