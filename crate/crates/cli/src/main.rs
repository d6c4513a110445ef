mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "glmask", version, about = "Gradient-guided loss masking for noisy parallel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every data-touching command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global seed (falls back to GLMASK_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cipher corpus with injected noise.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training pairs, before clean/dev/test are added.
        #[arg(long)]
        n: Option<usize>,
        /// Source vocabulary size.
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        noise_copied: Option<f64>,
        #[arg(long)]
        noise_misaligned: Option<f64>,
        #[arg(long)]
        noise_junk: Option<f64>,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model in one of the four modes.
    Train {
        #[arg(long, value_parser = ["vanilla", "finetune", "glmask-sent", "glmask-word"])]
        mode: Option<String>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from (required for finetune).
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a TSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "both", value_parser = ["bleu", "acc", "both"])]
        metric: String,
        /// Directory holding src.vocab and trg.vocab; defaults to the
        /// checkpoint's run directory.
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
    },
    /// Write the masking analysis bundle for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "word", value_parser = ["sent", "word"])]
        granularity: String,
        #[arg(long, default_value_t = 5000)]
        subset_size: usize,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        top_k: u64,
        #[arg(long, default_value_t = 5)]
        min_count: u64,
        /// Masked example sentences to dump.
        #[arg(long, default_value_t = 20)]
        examples: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Run every gradient and alignment oracle check.
    Check {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            n,
            vocab,
            noise_copied,
            noise_misaligned,
            noise_junk,
            force,
            cfg,
        } => commands::gen_data(&out, n, vocab, [noise_copied, noise_misaligned, noise_junk], force, &cfg),
        Command::Train {
            mode,
            data_dir,
            out,
            init_checkpoint,
            total_steps,
            cfg,
        } => commands::train(mode.as_deref(), &data_dir, &out, init_checkpoint.as_deref(), total_steps, &cfg),
        Command::Eval {
            checkpoint,
            data,
            metric,
            vocab_dir,
        } => commands::eval(&checkpoint, &data, &metric, vocab_dir.as_deref()),
        Command::Analyze {
            checkpoint,
            data_dir,
            out,
            granularity,
            subset_size,
            top_k,
            min_count,
            examples,
            batch_size,
        } => commands::analyze(&commands::AnalyzeArgs {
            checkpoint,
            data_dir,
            out,
            granularity,
            subset_size,
            top_k: top_k as usize,
            min_count,
            examples,
            batch_size,
        }),
        Command::Check { seed, trials } => commands::check(seed, trials),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<glmask::Error>() {
                Some(glmask::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
