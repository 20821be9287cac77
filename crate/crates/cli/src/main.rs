mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "oceanprompt", version, about = "Reconstruct subsurface vertical velocity from partial surface observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(#[command(flatten)] Common),
    /// Train one or more model variants.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated variants (full, no_scp, no_gsao).
        #[arg(long)]
        variants: Option<String>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subsets such as `SSH,SSH+U+V`.
        #[arg(long)]
        masks: Option<String>,
        /// Also write predicted and true fields for plotting.
        #[arg(long)]
        dump_fields: bool,
    },
    /// Evaluate a checkpoint over a family of observation subsets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        masks: Option<String>,
    },
    /// Compare variants trained under the same configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        masks: Option<String>,
    },
    /// Check conditional-entropy monotonicity on random and synthetic distributions.
    EntropyCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Render metric charts from a CSV report and heatmaps from dumped fields.
    Plot {
        /// Metrics CSV written by eval, sweep, or ablate.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Field dump written by `eval --dump-fields`.
        #[arg(long)]
        fields: Option<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(common) => commands::gen(&common),
        Command::Train {
            common,
            resume,
            variants,
        } => commands::train(&common, resume.as_deref(), variants.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            masks,
            dump_fields,
        } => commands::eval(&common, checkpoint.as_deref(), masks.as_deref(), dump_fields),
        Command::Sweep {
            common,
            checkpoint,
            masks,
        } => commands::sweep(&common, checkpoint.as_deref(), masks.as_deref()),
        Command::Ablate {
            common,
            variants,
            masks,
        } => commands::ablate(&common, variants.as_deref(), masks.as_deref()),
        Command::EntropyCheck { common, trials } => commands::entropy_check(&common, trials),
        Command::Plot { csv, fields, out } => plot::run(csv.as_deref(), fields.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
