use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "mtur", version, about = "Transmission-guided underwater image restoration")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Config file: JSON object or `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image parallel work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Image size (training crops, synthetic data, benchmark).
    #[arg(long, global = true)]
    pub size: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum RestoreMode {
    Classical,
    Neural,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Png,
    Mttb,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate the transmission map of an image.
    Mt {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Airlight `r,g,b`; estimated from the image when omitted.
        #[arg(long)]
        airlight: Option<String>,
    },
    /// Apply the underwater formation model to clean images.
    Degrade {
        /// Image file or directory.
        #[arg(short, long)]
        input: PathBuf,
        /// Image file or directory (mirrors the input).
        #[arg(short, long)]
        output: PathBuf,
        /// Transmission map used for all channels instead of a random medium.
        #[arg(long)]
        transmission: Option<PathBuf>,
        #[arg(long)]
        airlight: Option<String>,
        /// Where to write the (green-channel) transmission map; single file only.
        #[arg(long)]
        save_transmission: Option<PathBuf>,
    },
    /// Restore a degraded image.
    Restore {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "classical")]
        mode: RestoreMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Classical mode: known transmission map.
        #[arg(long)]
        transmission: Option<PathBuf>,
        /// Classical mode: known airlight `r,g,b`.
        #[arg(long)]
        airlight: Option<String>,
        /// Neural mode: also write the predicted transmission map.
        #[arg(long)]
        mt_output: Option<PathBuf>,
    },
    /// Generate synthetic training pairs and a manifest.
    SynthData {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Directory of clean images; procedural scenes when omitted.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "png")]
        format: DataFormat,
    },
    /// Train a model.
    Train {
        /// Dataset manifest; procedural pairs when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the report.
        #[arg(short, long)]
        output: PathBuf,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Log every this many iterations.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Score images (optionally against references) into an EvalReport.
    Eval {
        /// Directory of images to score.
        #[arg(short, long)]
        input: PathBuf,
        /// Directory of references paired by file name.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report JSON path.
        #[arg(short, long)]
        output: PathBuf,
        /// Restore the inputs with this checkpoint before scoring.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "mtur")]
        method: String,
    },
    /// Measure inference throughput.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the results as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the layer table of the configured network.
    Describe,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error[usage]: {}", msg.trim_start_matches("error: ").trim_end());
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = commands::classify(&e);
            eprintln!("error[{tag}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
