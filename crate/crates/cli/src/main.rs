use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use meafdet::commands::{cmd_eval, cmd_fuse, cmd_synth, cmd_train, TrainOverrides};
use meafdet::error::{CliError, CliResult};
use meafdet_core::model::Modality;

/// Multimodal (RGB + infrared) small-target detection toolkit.
#[derive(Parser)]
#[command(name = "meafdet", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB/IR dataset with annotations.
    Synth {
        /// Run-config file carrying the synth_* keys.
        #[arg(long)]
        spec: PathBuf,
        /// Number of image pairs to generate.
        #[arg(long)]
        count: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a dataset directory.
    Train {
        /// Run-config file (key = value).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (rgb/, ir/, labels/, manifest.txt).
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss-curve CSV path [default: <out stem>.loss.csv].
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Disable the training-time reconstruction branch.
        #[arg(long)]
        no_sr: bool,
        /// Input modality override.
        #[arg(long, value_parser = parse_modality)]
        modality: Option<Modality>,
        /// Resume from a checkpoint (not supported; documented error).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset: per-class AP, mAP50, PR/F1 CSVs.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for report.txt and curve CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Score threshold for the operating point.
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        /// IoU threshold for matching and NMS.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Suppress the printed table.
        #[arg(long)]
        quiet: bool,
    },
    /// Export fusion-stage visualizations for one RGB/IR pair.
    Fuse {
        /// Checkpoint holding a fused-modality model.
        #[arg(long)]
        ckpt: PathBuf,
        /// RGB image (binary PPM, P6).
        #[arg(long)]
        rgb: PathBuf,
        /// IR image (binary PGM, P5).
        #[arg(long)]
        ir: PathBuf,
        /// Output directory for the grayscale maps.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    match s {
        "rgb" => Ok(Modality::Rgb),
        "ir" => Ok(Modality::Ir),
        "fused" => Ok(Modality::Fused),
        _ => Err(format!("bad modality `{s}` (rgb|ir|fused)")),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { spec, count, out } => cmd_synth(&spec, count, &out),
        Command::Train {
            config,
            data,
            out,
            csv,
            no_sr,
            modality,
            resume,
            quiet,
        } => {
            if resume.is_some() {
                return Err(CliError::usage(
                    "resume is not supported; start a fresh run (training is deterministic given the seed)",
                ));
            }
            let overrides = TrainOverrides {
                no_sr,
                modality,
            };
            cmd_train(&config, &data, &out, csv.as_deref(), &overrides, quiet).map(|_| ())
        }
        Command::Eval {
            ckpt,
            data,
            out,
            conf,
            iou,
            quiet,
        } => cmd_eval(&ckpt, &data, &out, conf, iou, quiet).map(|_| ()),
        Command::Fuse { ckpt, rgb, ir, out } => cmd_fuse(&ckpt, &rgb, &ir, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first_line = e.to_string();
            let first_line = first_line.lines().next().unwrap_or("bad arguments");
            eprintln!("ERROR: {first_line}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
