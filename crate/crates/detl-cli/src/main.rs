use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use detl_cli::commands;
use detl_cli::config::RunConfig;

/// Desk-scale transfer-learning pipeline for chest-image screening:
/// synthetic data generation, source pretraining, cross-validated transfer,
/// Grad-CAM heatmaps, and gradient checking.
#[derive(Parser)]
#[command(name = "detl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Additional `key=value` overrides (repeatable, applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn build(&self) -> detl_cli::Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.extend(self.set.iter().cloned());
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PGM files plus labels.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the binary source model from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (binary classes).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint and reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate the transfer step over the four-class dataset.
    Cv {
        #[command(flatten)]
        common: Common,
        /// Pretrained source checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (four classes).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained checkpoint and fine-tune on the full dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render Grad-CAM heatmap overlays as PPM files.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample ids, comma separated (default: one per class).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Class index to explain (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against 64-bit central differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the convolution backward rule; the command then succeeds
        /// only if the corruption is detected.
        #[arg(long)]
        inject_conv_fault: bool,
    },
}

fn run() -> detl_cli::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { common, out } => commands::cmd_gen_data(&common.build()?, out),
        Command::Pretrain { common, data, out } => {
            commands::cmd_pretrain(&common.build()?, data, out)
        }
        Command::Cv {
            common,
            checkpoint,
            data,
            out,
        } => commands::cmd_cv(&common.build()?, checkpoint, data, out),
        Command::Finetune {
            common,
            checkpoint,
            data,
            out,
        } => commands::cmd_finetune(&common.build()?, checkpoint, data, out),
        Command::Gradcam {
            common,
            checkpoint,
            data,
            ids,
            class,
            out,
        } => commands::cmd_gradcam(&common.build()?, checkpoint, data, ids, *class, out),
        Command::GradCheck {
            common,
            inject_conv_fault,
        } => commands::cmd_grad_check(&common.build()?, *inject_conv_fault),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
