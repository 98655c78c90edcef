//! `hiermoe`: data generation, both training stages, router finetuning and
//! the evaluation protocols, each writing metrics and plot-ready CSVs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiermoe::Error;

#[derive(Parser, Debug)]
#[command(name = "hiermoe", version, about = "Hierarchical MoE voxel decoding on a synthetic world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. Each command writes into `<out>/<command>/`,
    /// checkpoints go to `<out>/checkpoints/`.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Load datasets from this directory (as written by gen-data) instead of generating them.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/test datasets of the source and finetuning subjects.
    GenData,
    /// Train the MoE encoder.
    TrainStage1,
    /// Train time/space routers and the denoiser on a frozen encoder.
    TrainStage2 {
        /// Stage-1 checkpoint (default `<out>/checkpoints/stage1.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adapt U and the voxel routers to the finetuning subject.
    FinetuneRouters {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Share of the subject's training data (default from config).
        #[arg(long)]
        fraction: Option<f64>,
        /// Run every standard fraction plus a from-scratch retrain.
        #[arg(long)]
        sweep: bool,
    },
    /// Sample latents for held-out items.
    Sample {
        /// Stage-2 checkpoint (default `<out>/checkpoints/stage2.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Decoding cosines, oracles, partition recovery and (stage 2) sampling error.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cosine against principal-subspace rank of the decoded embeddings.
    Bottleneck {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Expected-gradients voxel attribution of the image cosine.
    Attribute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of held-out items to attribute.
        #[arg(long, default_value_t = 8)]
        items: usize,
        /// Hold routing at each item's own assignment along the paths.
        #[arg(long)]
        fixed_routing: bool,
    },
    /// Expert utilization, time preference and the sampler's routing trace.
    RoutingStats {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Collect every command's summary under `<out>` into one table.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::GenData => commands::gen_data(c),
        Command::TrainStage1 => commands::train_stage1(c),
        Command::TrainStage2 { checkpoint } => commands::train_stage2(c, checkpoint),
        Command::FinetuneRouters {
            checkpoint,
            fraction,
            sweep,
        } => commands::finetune(c, checkpoint, fraction, sweep),
        Command::Sample {
            checkpoint,
            items,
            guidance,
        } => commands::sample(c, checkpoint, items, guidance),
        Command::Eval { checkpoint } => commands::eval(c, checkpoint),
        Command::Bottleneck { checkpoint } => commands::bottleneck(c, checkpoint),
        Command::Attribute {
            checkpoint,
            items,
            fixed_routing,
        } => commands::attribute(c, checkpoint, items, fixed_routing),
        Command::RoutingStats { checkpoint } => commands::routing_stats(c, checkpoint),
        Command::Report => commands::report(c),
    };
    match result {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hiermoe: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
