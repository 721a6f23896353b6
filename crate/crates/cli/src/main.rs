//! `dci`: generate scenes, attack a texture, evaluate detectors, emit reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 pipeline error,
//! 3 partial materialization.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dci", version, about = "Instant-level scene generation, texture attack and detection evaluation")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Inputs shared by every command that builds scenes.
#[derive(Debug, Args, Default)]
pub struct SceneArgs {
    /// Vehicle OBJ model.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Vehicle texture file.
    #[arg(long)]
    pub texture: Option<PathBuf>,
    /// Directory of exported background frames (`<frame>.png` + `<frame>.json`).
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
    /// JSON list of weather presets.
    #[arg(long)]
    pub weather_presets: Option<PathBuf>,
    /// Square image side in pixels.
    #[arg(long)]
    pub res: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a manifest and materialize its images and labels.
    Generate(GenerateArgs),
    /// Optimize a texture against the detector on a generated dataset.
    Attack(AttackArgs),
    /// Score textures on a generated dataset.
    Evaluate(EvaluateArgs),
    /// Render a saved evaluation as a table or PR chart.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// `continuous` (scripted trajectories) or `discrete` (parameter grid).
    #[arg(long)]
    pub part: Option<String>,
    /// Comma-separated preset names, or `all`.
    #[arg(long, value_delimiter = ',')]
    pub weathers: Option<Vec<String>>,
    /// JSON list of scene scripts (continuous part).
    #[arg(long)]
    pub scripts: Option<PathBuf>,
    /// Meters between trajectory samples (continuous part).
    #[arg(long)]
    pub step: Option<f64>,
    /// Number of evenly spaced azimuths (discrete part).
    #[arg(long)]
    pub azimuths: Option<usize>,
    /// Number of camera distances (discrete part).
    #[arg(long)]
    pub distances: Option<usize>,
    /// Number of vehicle locations (discrete part).
    #[arg(long)]
    pub locations: Option<usize>,
    /// Keep a seeded sample of at most this many entries (discrete part).
    #[arg(long)]
    pub cap: Option<usize>,
    /// Print the entry count and write nothing.
    #[arg(long)]
    pub count_only: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Saved toy detector; trained from the dataset when absent.
    #[arg(long)]
    pub detector_model: Option<PathBuf>,
    /// Gradient step size.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many updates (0 copies the input texture).
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// `name=path` textures to score, in row order. Defaults to the dataset's texture as `initial`.
    #[arg(long = "eval-texture", value_name = "NAME=PATH")]
    pub textures: Vec<String>,
    /// Texture the others are compared with.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Saved toy detector; trained from the dataset when absent.
    #[arg(long)]
    pub detector_model: Option<PathBuf>,
    /// Read detections from `<dir>/<texture>/<image>.detections.json` instead of running a model.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Detector name used in the table header for external detections.
    #[arg(long, default_value = "external")]
    pub external_name: String,
    /// One row per texture and weather.
    #[arg(long)]
    pub by_weather: bool,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` written by `evaluate`.
    #[arg(long)]
    pub input: PathBuf,
    /// csv, markdown or svg.
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Emit the AP decline against this texture instead of the AP table.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Chart title for svg output.
    #[arg(long, default_value = "Precision-recall")]
    pub title: String,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

impl Fail {
    pub fn config(message: impl fmt::Display) -> Self {
        Fail {
            code: 1,
            message: message.to_string(),
        }
    }

    pub fn pipeline(message: impl fmt::Display) -> Self {
        Fail {
            code: 2,
            message: message.to_string(),
        }
    }

    pub fn partial(message: impl fmt::Display) -> Self {
        Fail {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Flags shared by all commands.
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        workers: cli.workers,
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&globals, a),
        Command::Attack(a) => commands::attack(&globals, a),
        Command::Evaluate(a) => commands::evaluate(&globals, a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
