use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use nowcast_cli::experiment::Experiment;
use nowcast_cli::{commands, Outputs, Result};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Radar nowcasting: synthetic data, training, baselines, scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic radar sequences into a data directory
    GenData {
        /// Experiment config (key = value lines)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for seq_*.nwrs files
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model variant
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of seq_*.nwrs files from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Run directory for loss.csv and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Override the config's variant: base, hrrr, lv, or hrrr_lv
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run a trained checkpoint over every dataset window
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file from train (model.ckpt or model_swa.ckpt)
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for pred_*.nwrs forecasts
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Extrapolation baselines over the same windows as predict
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// persistence or optical-flow
        #[arg(long)]
        method: String,
    },
    /// Score a directory of forecasts against the dataset's truth windows
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory of pred_*.nwrs files from predict or baseline
        #[arg(long)]
        forecasts: PathBuf,
        /// Run directory for metrics.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Write grayscale PGM rasters of a forecast next to its truth
    Render {
        /// Forecast sequence (pred_*.nwrs)
        #[arg(long)]
        pred: PathBuf,
        /// Truth sequence holding frames at the forecast's minutes
        /// (e.g. the seq_*.nwrs it was forecast from)
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, outputs: &mut Outputs) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let exp = Experiment::load(&config, None)?;
            commands::gen_data(&exp, &out, outputs)
        }
        Command::Train { config, data, out, variant } => {
            let exp = Experiment::load(&config, variant.as_deref())?;
            commands::train(&exp, &data, &out, outputs)
        }
        Command::Predict { config, data, ckpt, out, variant } => {
            let exp = Experiment::load(&config, variant.as_deref())?;
            commands::predict(&exp, &data, &ckpt, &out, outputs)
        }
        Command::Baseline { config, data, out, method } => {
            let exp = Experiment::load(&config, None)?;
            commands::baseline(&exp, &method, &data, &out, outputs)
        }
        Command::Evaluate { config, data, forecasts, out } => {
            let exp = Experiment::load(&config, None)?;
            commands::evaluate(&exp, &data, &forecasts, &out, outputs)
        }
        Command::Render { pred, truth, out } => commands::render(&pred, &truth, &out, outputs),
    }
}

fn main() {
    let cli = Cli::parse();
    let mut outputs = Outputs::default();
    if let Err(e) = run(cli, &mut outputs) {
        outputs.discard();
        eprintln!("error: {e}");
        exit(1);
    }
}
