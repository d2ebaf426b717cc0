use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use shape_targets::eval::MatchMode;
use shape_targets::heatmap::HeatmapMode;
use shape_targets_cli::commands;
use shape_targets_cli::config::{AnchorMode, CONFIG_ENV};
use shape_targets_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "shape-targets", version, about = "BEV detection target generation and evaluation pipeline")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnchorModeArg {
    Adaptive,
    Baseline,
    CenterOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeatmapModeArg {
    Correlated,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchModeArg {
    Center,
    Face,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic yard scene dataset.
    GenScene {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a ground-truth database from a dataset.
    BuildGtdb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Paste database objects into a dataset.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gtdb: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Anchor labels and regression targets per frame.
    TargetsAnchor {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<AnchorModeArg>,
    },
    /// Center heatmaps and peak payloads per frame.
    TargetsHeatmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<HeatmapModeArg>,
    },
    /// Append camera distance columns to every point.
    FuseCamera {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pillarize, encode and stack the most recent frames into one BEV grid.
    StackTemporal {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score detections against the dataset's ground truth.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        /// Detections file; defaults to the dataset's own.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<MatchModeArg>,
    },
    /// Export one plane of a tensor file as PNG.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        plane: usize,
        #[arg(long, default_value_t = 0)]
        depth: usize,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let config = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenScene { output, seed } => commands::gen_scene(&output, &config, seed),
        Command::BuildGtdb { input, output } => commands::build_gtdb(&input, &output, &config),
        Command::Augment { input, gtdb, output, seed } => commands::augment(&input, &gtdb, &output, &config, seed),
        Command::TargetsAnchor { input, output, mode } => {
            let mode = mode.map(|m| match m {
                AnchorModeArg::Adaptive => AnchorMode::Adaptive,
                AnchorModeArg::Baseline => AnchorMode::Baseline,
                AnchorModeArg::CenterOnly => AnchorMode::CenterOnly,
            });
            commands::targets_anchor(&input, &output, &config, mode)
        }
        Command::TargetsHeatmap { input, output, mode } => {
            let mode = mode.map(|m| match m {
                HeatmapModeArg::Correlated => HeatmapMode::Correlated,
                HeatmapModeArg::Baseline => HeatmapMode::UncorrelatedBaseline,
            });
            commands::targets_heatmap(&input, &output, &config, mode)
        }
        Command::FuseCamera { input, output } => commands::fuse_camera(&input, &output, &config),
        Command::StackTemporal { input, output } => commands::stack_temporal(&input, &output, &config),
        Command::Evaluate { input, detections, output, csv, mode } => {
            let mode = mode.map(|m| match m {
                MatchModeArg::Center => MatchMode::CenterDistance,
                MatchModeArg::Face => MatchMode::FaceAlignment,
            });
            commands::evaluate(&input, detections.as_deref(), &output, csv.as_deref(), &config, mode)
        }
        Command::Render { input, output, plane, depth } => commands::render(&input, &output, plane, depth),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(1)
        }
    }
}
