//! voxdiff: train text-conditioned 3D diffusion models on synthetic
//! phantoms, generate counterfactual volume pairs from shared noise, and
//! evaluate them.
//!
//! Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.

mod commands;
mod data_io;
mod pgm;
mod runconfig;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxdiff::error::Error;

#[derive(Parser)]
#[command(name = "voxdiff", version, about = "desk-scale text-conditioned 3D diffusion engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset (VOL1 volumes + manifest + split).
    GenData {
        /// Task: "lesion" or "cognition".
        #[arg(long)]
        task: String,
        /// Number of subjects (one volume each, minimum 10).
        #[arg(long)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Optional key=value config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model variant on a dataset directory.
    Train {
        /// Variant: wdm, latent-linear or latent-rflow.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.2)]
        null_prompt_prob: f64,
        #[arg(long, default_value_t = 16)]
        base_channels: usize,
        #[arg(long, default_value_t = 2)]
        bottleneck_extra_blocks: usize,
        /// Autoencoder pretraining steps (latent variants).
        #[arg(long, default_value_t = 600)]
        ae_steps: usize,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Decode one noise seed under two prompts and write the pair plus a
    /// difference map and slice grid.
    Counterfactual {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt_a: String,
        #[arg(long)]
        prompt_b: String,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Sampler steps (0 = variant default).
        #[arg(long, default_value_t = 25)]
        steps: usize,
        /// Classifier-free guidance scale (omit for no guidance).
        #[arg(long)]
        guidance: Option<f64>,
        /// Sampler override: ddim or rflow-euler.
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the sampling protocol and compute the metric report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        n_per_prompt: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        /// Reuse a trained classifier blob instead of training one.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Also persist every generated volume under out/protocol/.
        #[arg(long)]
        save_volumes: bool,
    },
    /// Sweep classifier-free guidance scales and tabulate the trade-off.
    AblateGuidance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated guidance scales, e.g. 0.5,1,2,3.
        #[arg(long, default_value = "0.5,1,2,3")]
        scales: String,
        #[arg(long, default_value_t = 12)]
        n_per_prompt: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> voxdiff::Result<()> {
    match cli.command {
        Command::GenData {
            task,
            subjects,
            seed,
            out,
            force,
            config,
        } => commands::cmd_gen_data(&commands::GenDataArgs {
            task,
            subjects,
            seed,
            out,
            force,
            config,
        }),
        Command::Train {
            variant,
            data,
            steps,
            seed,
            out,
            learning_rate,
            null_prompt_prob,
            base_channels,
            bottleneck_extra_blocks,
            ae_steps,
            checkpoint_every,
            log_every,
            resume,
            force,
            config,
        } => commands::cmd_train(&commands::TrainArgs {
            variant,
            data,
            steps,
            seed,
            out,
            learning_rate,
            null_prompt_prob,
            base_channels,
            bottleneck_extra_blocks,
            ae_steps,
            checkpoint_every,
            log_every,
            resume,
            force,
            config,
        }),
        Command::Counterfactual {
            checkpoint,
            prompt_a,
            prompt_b,
            noise_seed,
            steps,
            guidance,
            sampler,
            out,
            force,
        } => commands::cmd_counterfactual(&commands::CounterfactualArgs {
            checkpoint,
            prompt_a,
            prompt_b,
            noise_seed,
            steps,
            guidance,
            sampler,
            out,
            force,
        }),
        Command::Evaluate {
            checkpoint,
            data,
            n_per_prompt,
            noise_seed,
            guidance,
            sampler,
            steps,
            classifier,
            out,
            force,
            save_volumes,
        } => commands::cmd_evaluate(&commands::EvaluateArgs {
            checkpoint,
            data,
            n_per_prompt,
            noise_seed,
            guidance,
            sampler,
            steps,
            classifier,
            out,
            force,
            save_volumes,
        }),
        Command::AblateGuidance {
            checkpoint,
            data,
            scales,
            n_per_prompt,
            noise_seed,
            sampler,
            steps,
            classifier,
            out,
            force,
        } => commands::cmd_ablate_guidance(&commands::AblateArgs {
            checkpoint,
            data,
            scales,
            n_per_prompt,
            noise_seed,
            sampler,
            steps,
            classifier,
            out,
            force,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match &e {
                Error::InvalidArg(_) => ("usage", 2),
                Error::Shape(_) | Error::Data(_) | Error::Io(_) => ("data", 3),
                Error::Numeric(_) => ("numeric", 4),
            };
            eprintln!("error[{tag}]: {e}");
            ExitCode::from(code)
        }
    }
}
