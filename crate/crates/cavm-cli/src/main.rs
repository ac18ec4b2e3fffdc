use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavm_cli::{commands, exit_code};

#[derive(Parser)]
#[command(name = "cavm", about = "Staircase-masked autoregressive contrast-dose image synthesis", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dose-ramp phantom dataset.
    GenData {
        /// Output dataset directory (train/, val/, test/ are created inside).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        val: usize,
        #[arg(long, default_value_t = 4)]
        test: usize,
        /// Image side length (even, >= 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// First phantom seed; samples use consecutive seeds.
        #[arg(long, default_value_t = 1000)]
        seed: u64,
    },
    /// Phase 1: pretrain the decomposition tokenizers and decoder.
    TrainTokenizer {
        /// TOML run config (preset + overrides); defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path; a JSONL loss log is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Override the number of optimization steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Phase 2: train the dose autoregression on frozen tokenizers.
    TrainAr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Phase-1 checkpoint to initialize from (required).
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run gradual dose-increase inference on one input sample.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input sample file (.cavm).
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the per-dose images.
        #[arg(long)]
        out: PathBuf,
        /// Override the number of dose steps (1..=3).
        #[arg(long)]
        steps: Option<usize>,
        /// Also write 8-bit PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Region-split SSIM/PSNR on the test split, with a copy-input baseline.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the dose-step ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output report path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pretrain_steps: Option<u64>,
        #[arg(long)]
        ar_steps: Option<u64>,
    },
}

fn run(cmd: Cmd) -> cavm_core::Result<()> {
    match cmd {
        Cmd::GenData { out, train, val, test, size, seed } => {
            commands::gen_data(&out, train, val, test, size, seed)
        }
        Cmd::TrainTokenizer { config, data, out, steps } => {
            commands::train_tokenizer(config.as_deref(), &data, &out, steps)
        }
        Cmd::TrainAr { config, data, init, out, steps } => {
            commands::train_ar(config.as_deref(), &data, &init, &out, steps)
        }
        Cmd::Synthesize { ckpt, input, out, steps, pgm } => {
            commands::synthesize_cmd(&ckpt, &input, &out, steps, pgm)
        }
        Cmd::Evaluate { ckpt, data, out } => commands::evaluate_cmd(&ckpt, &data, &out),
        Cmd::Ablate { config, data, out, pretrain_steps, ar_steps } => {
            commands::ablate_cmd(config.as_deref(), &data, &out, pretrain_steps, ar_steps)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
