mod commands;
mod manifest;
mod modality;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Cross-modal association between variational auto-encoders.
#[derive(Parser, Debug)]
#[command(name = "cmas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the training commands. Flags override config-file keys.
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DataFlags {
    /// MNIST-layout directory holding the IDX files.
    #[arg(long, env = "CMAS_DATA_DIR")]
    pub data: PathBuf,
    /// Use only the first N training items.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Use only the first N test items.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every operation and both losses.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Phase one: train one modality's auto-encoder.
    TrainIntra {
        #[arg(long)]
        modality: String,
        #[arg(long, default_value_t = 16)]
        latent_dim: usize,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase two: train the associator from `--src` to `--tgt`.
    TrainCross {
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        paired_fraction: Option<f64>,
        /// Directories with trained checkpoints; repeatable.
        #[arg(long, required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recognition network used for scoring.
    TrainRecognizer {
        #[arg(long)]
        modality: String,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate target-modality samples along one or more associators.
    Generate {
        #[arg(long, requires = "to", conflicts_with = "path")]
        from: Option<String>,
        #[arg(long, requires = "from")]
        to: Option<String>,
        /// Comma-separated modality chain, e.g. `a,b,c`.
        #[arg(long, value_delimiter = ',')]
        path: Option<Vec<String>>,
        /// Which split feeds the generator.
        #[arg(long, default_value = "test", value_parser = ["test", "train"])]
        input: String,
        /// `mean` or `sampled` latents along the path.
        #[arg(long, default_value = "mean")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a scenario by reconstruction accuracy.
    Eval {
        /// `perm`, `rotinv`, `cascade`, or `a,b` for any trained pair.
        #[arg(long)]
        scenario: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "mean")]
        mode: String,
        /// Recorded in the CSV; taken from the cross-phase manifests when omitted.
        #[arg(long)]
        paired_fraction: Option<f64>,
        #[arg(long, required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross accuracy over paired fractions and seeds, as one CSV.
    Sweep {
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.25,1.0")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status: 0 success, 1 verification failure, 2 usage or
/// prerequisite error.
pub enum Outcome {
    Ok,
    VerificationFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck { inject_fault } => commands::gradcheck(inject_fault.as_deref()),
        Command::TrainIntra {
            modality,
            latent_dim,
            hidden,
            data,
            train,
            out,
        } => commands::train_intra(&modality, latent_dim, hidden, &data, &train, &out),
        Command::TrainCross {
            src,
            tgt,
            paired_fraction,
            models,
            data,
            train,
            out,
        } => commands::train_cross(&src, &tgt, paired_fraction, &models, &data, &train, &out),
        Command::TrainRecognizer {
            modality,
            data,
            train,
            out,
        } => commands::train_recognizer(&modality, &data, &train, &out),
        Command::Generate {
            from,
            to,
            path,
            input,
            mode,
            seed,
            models,
            data,
            out,
        } => {
            let chain = match (from, to, path) {
                (Some(f), Some(t), None) => vec![f, t],
                (None, None, Some(p)) => p,
                _ => {
                    eprintln!("error: give either --from and --to, or --path");
                    return ExitCode::from(2);
                }
            };
            commands::generate(&chain, &input, &mode, seed, &models, &data, &out)
        }
        Command::Eval {
            scenario,
            seeds,
            mode,
            paired_fraction,
            models,
            data,
            out,
        } => commands::eval(&scenario, &seeds, &mode, paired_fraction, &models, &data, &out),
        Command::Sweep {
            src,
            tgt,
            fractions,
            seeds,
            models,
            data,
            train,
            out,
        } => commands::sweep(&src, &tgt, &fractions, &seeds, &models, &data, &train, &out),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
