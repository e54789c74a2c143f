//! `misnet` command line: train, eval, predict, ablate, report.

use clap::{Args, Parser, Subcommand, ValueEnum};
use misnet::commands::{
    cmd_ablate, cmd_eval, cmd_predict, cmd_report, cmd_train, AblateCmd, EvalCmd, PredictCmd,
    ReportCmd, TrainCmd,
};
use misnet::metrics::ThresholdMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "misnet", version, about = "Polyp segmentation trainer and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdModeArg {
    /// Binarize predictions at 0.5.
    Fixed,
    /// Binarize at min(2 * mean, 1) per image.
    Adaptive,
}

impl From<ThresholdModeArg> for ThresholdMode {
    fn from(v: ThresholdModeArg) -> ThresholdMode {
        match v {
            ThresholdModeArg::Fixed => ThresholdMode::Fixed(0.5),
            ThresholdModeArg::Adaptive => ThresholdMode::Adaptive,
        }
    }
}

#[derive(Args)]
struct CommonTrainFlags {
    /// Config file (flat key = value); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    data_root: PathBuf,
    /// Output directory for checkpoints, logs and the resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Backbone id (res2net or toy).
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rebuild the split manifest even if a cached one exists.
    #[arg(long)]
    refresh_manifest: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing latest/best checkpoints each epoch.
    Train {
        #[command(flatten)]
        common: CommonTrainFlags,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a resume checkpoint whose config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint (or a directory of rendered predictions) on the
    /// test split of every dataset under the data root.
    Eval {
        /// Trained checkpoint to score.
        #[arg(long, conflicts_with = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Directory of prediction images to score instead of a model.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "fixed")]
        threshold_mode: ThresholdModeArg,
        /// Accept a checkpoint whose config hash differs from --config.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        refresh_manifest: bool,
    },
    /// Render probability maps for an image or a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image file, directory of images, or dataset root.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and score the component-removal grid.
    Ablate {
        #[command(flatten)]
        common: CommonTrainFlags,
        /// Comma-separated variant names (default: the full grid).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "fixed")]
        threshold_mode: ThresholdModeArg,
    },
    /// Re-render stored metric CSVs as one combined markdown table.
    Report {
        /// Metric CSV files or directories containing *_metrics.csv.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Markdown file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> misnet::Result<()> {
    match cli.command {
        Command::Train { common, resume, force } => {
            let cmd = TrainCmd {
                config: common.config,
                data_root: common.data_root,
                out: common.out,
                epochs: common.epochs,
                batch_size: common.batch_size,
                backbone: common.backbone,
                seed: common.seed,
                resume,
                force,
                refresh_manifest: common.refresh_manifest,
                quiet: false,
            };
            let summary = cmd_train(&cmd)?;
            println!(
                "done: {} epochs, best val mDice {:.4}",
                summary.epochs.len(),
                summary.best_val_mdice
            );
        }
        Command::Eval {
            checkpoint,
            pred_dir,
            config,
            data_root,
            out,
            threshold_mode,
            force,
            refresh_manifest,
        } => {
            let cmd = EvalCmd {
                checkpoint,
                pred_dir,
                config,
                data_root,
                out,
                threshold_mode: threshold_mode.into(),
                force,
                refresh_manifest,
            };
            let result = cmd_eval(&cmd)?;
            print!("{}", std::fs::read_to_string(&result.report_path)?);
            println!("report written to {}", result.report_path.display());
        }
        Command::Predict { checkpoint, config, input, out, force } => {
            let cmd = PredictCmd { checkpoint, config, input, out, force };
            let written = cmd_predict(&cmd)?;
            println!("wrote {} probability maps", written.len());
        }
        Command::Ablate { common, variants, threshold_mode } => {
            let cmd = AblateCmd {
                config: common.config,
                data_root: common.data_root,
                out: common.out,
                epochs: common.epochs,
                batch_size: common.batch_size,
                backbone: common.backbone,
                seed: common.seed,
                variants,
                threshold_mode: threshold_mode.into(),
                refresh_manifest: common.refresh_manifest,
                quiet: false,
            };
            let path = cmd_ablate(&cmd)?;
            print!("{}", std::fs::read_to_string(&path)?);
            println!("table written to {}", path.display());
        }
        Command::Report { inputs, out } => {
            let cmd = ReportCmd { inputs, out };
            let path = cmd_report(&cmd)?;
            println!("table written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
