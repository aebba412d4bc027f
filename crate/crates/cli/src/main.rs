//! `ssws`: PAMR refinement of real images, toy training, evaluation and
//! gradient checks.
//!
//! Exit codes: 0 success, 1 a threshold or runtime failure, 2 malformed input.

mod gradcheck;
mod palette;
mod refine;
mod toy;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ssws", version, about = "Single-stage weakly supervised segmentation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine class scores against an RGB image with PAMR.
    Refine {
        /// RGB (or grey/indexed) PNG.
        #[arg(long)]
        image: PathBuf,
        /// `C x h x w` TNSR of raw scores. Softmaxed over channels after
        /// nearest upsampling to the image size.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12,24")]
        dilations: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        sigma_floor: f64,
        /// Refined `C x H x W` mask.
        #[arg(long)]
        out: PathBuf,
        /// Argmax labels as an indexed PNG with the VOC colour map.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Train the toy network and write metrics plus validation label maps.
    TrainToy {
        /// Experiment JSON. Missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides both the training and the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean IoU between two directories of `H x W` label-map TNSR files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Labels including background. Inferred from the data when absent.
        #[arg(long)]
        num_labels: Option<usize>,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic gradient against central differences on a random instance.
    Gradcheck {
        #[arg(long, value_enum)]
        op: gradcheck::Op,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Malformed user input. Maps to exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Refine {
            image,
            scores,
            dilations,
            iters,
            sigma_floor,
            out,
            png,
        } => refine::run(&refine::Args {
            image,
            scores,
            dilations,
            iters,
            sigma_floor,
            out,
            png,
        }),
        Command::TrainToy {
            config,
            out_dir,
            seed,
        } => toy::train(config.as_deref(), &out_dir, seed),
        Command::Eval {
            pred,
            gt,
            num_labels,
            out,
        } => toy::eval(&pred, &gt, num_labels, out.as_deref()),
        Command::Gradcheck { op, seed } => gradcheck::run(op, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
