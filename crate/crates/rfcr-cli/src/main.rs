use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfcr_cli::{
    cmd_ablate, cmd_eval, cmd_hierarchy, cmd_rfcc, cmd_synth, cmd_train, exit_code_for,
};

/// Gradual receptive-field component reasoning for point-cloud semantic
/// segmentation.
#[derive(Parser)]
#[command(name = "rfcr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled scenes and a split manifest.
    Synth {
        /// Scene spec file; omit to generate procedural mini-rooms.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Class count for procedural mini-rooms.
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Build and dump the sampling hierarchy of one scene.
    Hierarchy {
        scene: PathBuf,
        /// Hierarchy config (key = value); defaults used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build hierarchy + receptive-field component codes for one scene.
    Rfcc {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output prefix; writes <out>.hier, <out>.rfcc, <out>.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "multi_hot")]
        mode: String,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Train a network from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the target mode (multi_hot | one_hot | ovu).
        #[arg(long)]
        mode: Option<String>,
        /// Override the supervision mask ("all" or e.g. "2,4").
        #[arg(long)]
        mask: Option<String>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fixed ablation grid and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; falls back to RFCR_THREADS, then 1.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("RFCR_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out, count, seed, classes } => {
            cmd_synth(config.as_deref(), out, *count, *seed, *classes)
        }
        Command::Hierarchy { scene, config, out } => {
            cmd_hierarchy(scene, config.as_deref(), out)
        }
        Command::Rfcc { scene, config, out, mode, classes } => {
            cmd_rfcc(scene, config.as_deref(), out, mode, *classes)
        }
        Command::Train { config, out, seed, mode, mask } => {
            cmd_train(config, out, *seed, mode.as_deref(), mask.as_deref())
        }
        Command::Eval { checkpoint, config, out } => cmd_eval(checkpoint, config, out),
        Command::Ablate { config, out, threads } => {
            cmd_ablate(config, out, thread_count(*threads))
        }
    };
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
