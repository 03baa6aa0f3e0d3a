mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tinydetr::distill::{KdIou, ScheduleKind};

#[derive(Parser, Debug)]
#[command(name = "tinydetr", version, about = "Desk-scale small-object detection transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a detector, or run the 2x2 mechanism ablation.
    Train(TrainArgs),
    /// Train a student with decoder-output distillation.
    Distill(DistillArgs),
    /// Score detections against a dataset.
    Eval(EvalArgs),
    /// Dump encoder and attention maps of a checkpoint as PGM images.
    DemoDdf(DemoArgs),
    /// Time the four box-overlap measures.
    BenchIou(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// Structured run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Student,
    Teacher,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    common: TrainOverrides,
    /// Model size preset (channels and decoder depth); overrides the config file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Train all four query-select x encoder arms over `--seeds`.
    #[arg(long, conflicts_with_all = ["no_eiou_select", "no_ddf"])]
    ablation: bool,
    #[arg(long, value_delimiter = ',', requires = "ablation")]
    seeds: Option<Vec<u64>>,
    /// Plain IoU classification targets instead of Expanded-IoU.
    #[arg(long)]
    no_eiou_select: bool,
    /// Plain fusion blocks instead of dual-domain fusion in the encoder.
    #[arg(long)]
    no_ddf: bool,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    common: TrainOverrides,
    /// Teacher checkpoint, replayed over the dataset before training.
    #[arg(long, conflicts_with = "replay")]
    teacher: Option<PathBuf>,
    /// Recorded teacher outputs (JSON lines).
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, value_enum)]
    kd_iou: Option<KdIouArg>,
    #[arg(long)]
    w0: Option<f64>,
    /// Save the teacher outputs used for this run.
    #[arg(long)]
    write_replay: Option<PathBuf>,
    /// Run the undistilled student and all six schedule x box-loss arms.
    #[arg(long)]
    grid: bool,
    #[arg(long, value_delimiter = ',', requires = "grid")]
    seeds: Option<Vec<u64>>,
    /// Seeds for grid arms other than the one picked by --schedule/--kd-iou.
    #[arg(long, value_delimiter = ',', requires = "grid")]
    arm_seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Constant,
    Cosine,
    Linear,
}

impl From<ScheduleArg> for ScheduleKind {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Constant => ScheduleKind::Constant,
            ScheduleArg::Cosine => ScheduleKind::Cosine,
            ScheduleArg::Linear => ScheduleKind::Linear,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KdIouArg {
    Giou,
    ExpandedSiou,
}

impl From<KdIouArg> for KdIou {
    fn from(k: KdIouArg) -> Self {
        match k {
            KdIouArg::Giou => KdIou::Giou,
            KdIouArg::ExpandedSiou => KdIou::ExpandedSiou,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Detections as JSON lines `{image_id, detections: [{box, score, label}]}`.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    dets: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    /// Also write the metrics and resolved config here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Position of the scene in the dataset file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 1_000_000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
