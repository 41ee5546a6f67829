//! `orbitmask` command-line driver.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "orbitmask", version, about = "Masked discrete-diffusion multi-view generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run directory; every output goes under it.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the procedural multi-view dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_objects: Option<usize>,
    },
    /// Train the patch tokenizer and write a stage-0 checkpoint.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run one curriculum stage from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<u32>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Generate images (or an answer) with a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Reference image (i2mv), query image (mmu) or scene (turnstyle).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// Description for t2mv, caption for t2i.
        #[arg(long)]
        desc: Option<String>,
        /// Object region for turnstyle: `auto` or `row0,col0,row1,col1` in patches, end exclusive.
        #[arg(long)]
        region: Option<String>,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Score image-to-views generation against rendered ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long = "T")]
        steps: Option<usize>,
    },
    /// Compare the linear, quadratic and cosine schedules.
    AblateSchedule {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long = "T")]
        steps: Option<usize>,
        /// Comma-separated sampler seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// List a checkpoint's sections, tensors and metadata.
    InspectCheckpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, n_objects } => commands::gen_data(&common, n_objects),
        Command::TrainTokenizer { common, data, epochs } => {
            commands::train_tokenizer(&common, path_str(data), epochs)
        }
        Command::Train {
            common,
            stage,
            ckpt,
            data,
            steps,
            batch_size,
        } => commands::train(
            &common,
            commands::TrainFlags {
                stage,
                ckpt: path_str(ckpt),
                data: path_str(data),
                steps,
                batch_size,
            },
        ),
        Command::Sample {
            common,
            task,
            ckpt,
            reference,
            prompt,
            desc,
            region,
            steps,
            schedule,
            temperature,
        } => commands::sample(
            &common,
            commands::SampleFlags {
                task,
                ckpt: path_str(ckpt),
                reference: path_str(reference),
                prompt,
                desc,
                region,
                steps,
                schedule,
                temperature,
            },
        ),
        Command::Eval {
            common,
            ckpt,
            data,
            split,
            steps,
        } => commands::eval(&common, path_str(ckpt), path_str(data), split, steps),
        Command::AblateSchedule {
            common,
            ckpt,
            data,
            split,
            steps,
            seeds,
        } => commands::ablate(&common, path_str(ckpt), path_str(data), split, steps, seeds),
        Command::InspectCheckpoint { common, ckpt } => commands::inspect(&common, path_str(ckpt)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("orbitmask: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
