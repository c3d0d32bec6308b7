//! `longichange`: phantom data, training, inference and lesion-wise scoring.

mod commands;
mod config;
mod manifest;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<longichange::Error> for CliError {
    fn from(e: longichange::Error) -> Self {
        match e {
            longichange::Error::InvalidArgument { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "longichange",
    version,
    about = "Self-supervised change detection for longitudinal 3D scans"
)]
struct Cli {
    /// JSON run configuration; every key must be present. Defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every seeded stage (wins over LONGICHANGE_SEED and the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the default configuration to this path and exit.
    #[arg(long)]
    write_default_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal dataset with known change masks.
    Phantom {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        change_probability: Option<f64>,
    },
    /// Normalise intensities (and optionally resample) every scan of a dataset.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the VAE on the no-change pairs of a dataset.
    TrainVae {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        schedule: commands::ScheduleFlags,
    },
    /// Dump SuperMix samples as volumes and PNG mosaics.
    SynthPreview {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the change detector on SuperMix samples of no-change pairs.
    TrainDetector {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        schedule: commands::ScheduleFlags,
    },
    /// Predict change probability maps, masks and blob tables.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        post: commands::PostFlags,
    },
    /// Score predictions lesion-wise against the dataset's change masks.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        post: commands::PostFlags,
        #[arg(long)]
        iou_min: Option<f64>,
    },
    /// Join evaluation runs into one summary table.
    Report {
        /// `name=evaluation_dir`, repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[command(flatten)]
        out: OutArg,
    },
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} target={} msg={:?}",
                buf.timestamp_millis(),
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args().to_string()
            )
        })
        .init();
}

fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    let env_seed = match std::env::var("LONGICHANGE_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("LONGICHANGE_SEED is not an unsigned integer: {s:?}")))?,
        ),
        Err(_) => None,
    };
    let seed = cli.seed.or(env_seed);
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(path) = &cli.write_default_config {
        let text = serde_json::to_string_pretty(&Config::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        return Ok(());
    }
    let mut cfg = resolve_config(&cli)?;
    let Some(command) = cli.command else {
        return Err(CliError::Config("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Phantom {
            out,
            n_pairs,
            change_probability,
        } => {
            if let Some(n) = n_pairs {
                cfg.phantom.n_pairs = n;
            }
            if let Some(p) = change_probability {
                cfg.phantom.change_probability = p;
            }
            cfg.validate()?;
            commands::phantom(&cfg, &out.out)
        }
        Command::Preprocess { dataset, out } => {
            cfg.validate()?;
            commands::preprocess(&cfg, &dataset, &out.out)
        }
        Command::TrainVae { dataset, out, schedule } => {
            schedule.apply(&mut cfg.vae_schedule);
            cfg.validate()?;
            commands::train_vae(&cfg, &dataset, &out.out)
        }
        Command::SynthPreview {
            dataset,
            vae,
            count,
            out,
        } => {
            cfg.validate()?;
            commands::synth_preview(&cfg, &dataset, &vae, count, &out.out)
        }
        Command::TrainDetector {
            dataset,
            vae,
            out,
            schedule,
        } => {
            schedule.apply(&mut cfg.detector_schedule);
            cfg.validate()?;
            commands::train_detector(&cfg, &dataset, &vae, &out.out)
        }
        Command::Infer {
            dataset,
            detector,
            out,
            post,
        } => {
            post.apply(&mut cfg.inference);
            cfg.validate()?;
            commands::infer(&cfg, &dataset, &detector, &out.out)
        }
        Command::Evaluate {
            dataset,
            predictions,
            out,
            post,
            iou_min,
        } => {
            post.apply(&mut cfg.inference);
            if let Some(v) = iou_min {
                cfg.evaluation.iou_min = v;
            }
            cfg.validate()?;
            commands::evaluate(&cfg, &dataset, &predictions, &out.out)
        }
        Command::Report { runs, out } => commands::report(&cfg, &runs, &out.out),
    }
    .map(|manifest| log::info!("manifest={}", manifest.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
