mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::FileConfig;

/// Simulate multi-sweep LiDAR sequences, rectify moving objects, and
/// evaluate scene flow and detections.
#[derive(Parser, Debug)]
#[command(name = "flowbev", version, about)]
struct Cli {
    /// TOML file with [scenario], [align], [detection] and [bench] tables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sequences, a manifest and keyframe ground truth.
    Simulate(SimulateArgs),
    /// Merge, label and rectify sequences; export clouds, BEV grids and flows.
    Align(AlignArgs),
    /// Scene-flow metrics over flow files written by `align`.
    EvalFlow(EvalFlowArgs),
    /// Detection AP of predicted boxes against ground truth.
    EvalDet(EvalDetArgs),
    /// Footprint extents before and after rectification, per object.
    DemoShadow(DemoShadowArgs),
    /// Per-stage timing of the alignment pipeline.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Text,
    Json,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Seed of the first sequence; later ones count up.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_objects: Option<usize>,
    #[arg(long)]
    num_sweeps: Option<usize>,
    #[arg(long)]
    points_per_object: Option<usize>,
    #[arg(long)]
    background_points: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    ego_speed: Option<f64>,
    /// Object speed range as MIN,MAX (m/s).
    #[arg(long, value_name = "MIN,MAX", value_parser = parse_pair)]
    object_speed: Option<[f64; 2]>,
    #[arg(long)]
    xy_range: Option<f64>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (lo, hi) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([num(lo)?, num(hi)?])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    OracleFit,
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SegmentationArg {
    Gt,
    Dbscan,
}

#[derive(Args, Debug)]
struct AlignArgs {
    /// Sequence files.
    inputs: Vec<PathBuf>,
    /// Manifest written by `simulate`; its sequences are added to the inputs.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    segmentation: Option<SegmentationArg>,
    /// BEV pixel side in voxels.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalFlowArgs {
    /// Flow files, or directories searched for `*.flow.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DetModeArg {
    BevDistance,
    Iou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum IouKindArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Args, Debug)]
struct EvalDetArgs {
    /// Predicted detections.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth detections.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = DetModeArg::BevDistance)]
    mode: DetModeArg,
    #[arg(long, value_enum)]
    iou_kind: Option<IouKindArg>,
    /// Evaluate a single center-distance threshold (meters).
    #[arg(long)]
    threshold: Option<f64>,
    /// Drop low recall and subtract the precision floor before averaging.
    #[arg(long)]
    trim: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct DemoShadowArgs {
    /// Sequence to analyse; without it a scene with one car per speed is
    /// generated.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Speeds (m/s) of the generated cars.
    #[arg(long, value_delimiter = ',', default_value = "0,2,5,10")]
    speeds: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Approximate number of points in the sequence.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: OutputArgs,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration.
    Usage(anyhow::Error),
    /// Unreadable, malformed or unusable data.
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub trait UsageContext<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).usage()?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(a, file),
        Command::Align(a) => commands::align(a, file),
        Command::EvalFlow(a) => commands::eval_flow(a),
        Command::EvalDet(a) => commands::eval_det(a, file),
        Command::DemoShadow(a) => commands::demo_shadow(a, file),
        Command::Bench(a) => commands::bench(a, file),
    }
}
