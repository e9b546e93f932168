mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Learn a standard-font to rubbing-style glyph mapping and restore
/// incomplete rubbing characters.
#[derive(Debug, Parser)]
#[command(name = "rubbinggan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML, or JSON with a .json extension). Paths
    /// inside it are relative to the file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset root holding train/, test/ and incomplete/.
    #[arg(long, value_name = "DIR")]
    dataset_root: Option<PathBuf>,
    /// Output directory for manifests, checkpoints, logs and reports.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the dataset layout and write the three split manifests.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train the generator and both discriminators.
    Train {
        #[command(flatten)]
        common: Common,
        /// Total iteration target (a resumed run continues up to it).
        #[arg(long)]
        iterations: Option<u64>,
        /// Seed for initialization and batch order.
        #[arg(long)]
        seed: Option<u64>,
        /// Square training resolution.
        #[arg(long)]
        image_size: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Score the test split and export generated images.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the latest one in the output directory.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
    },
    /// Restore incomplete characters.
    Restore {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to use; defaults to the latest one in the output directory.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Request list (CSV or JSON with id, incomplete, label). Defaults to
        /// the labelled incomplete split.
        #[arg(long, value_name = "FILE")]
        requests: Option<PathBuf>,
        /// Font file for codepoint labels.
        #[arg(long, value_name = "FILE")]
        font: Option<PathBuf>,
        /// Where restored images go; defaults to <output-dir>/restored.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare { common } => commands::prepare(&common),
        Command::Train {
            common,
            iterations,
            seed,
            image_size,
            resume,
        } => commands::train(&common, iterations, seed, image_size, resume.as_deref()),
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint.as_deref()),
        Command::Restore {
            common,
            checkpoint,
            requests,
            font,
            out,
        } => commands::restore(&common, checkpoint.as_deref(), requests.as_deref(), font.as_deref(), out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
