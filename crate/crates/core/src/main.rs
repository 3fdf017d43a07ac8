use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use edgesense::compress::{self, CompactModel};
use edgesense::config::{load_config, RunConfig};
use edgesense::eval::{self, match_and_score, FlightScore};
use edgesense::nn::{self, NetworkModel};
use edgesense::pipeline;
use edgesense::simulator::{fly_mission, MissionConfig};
use edgesense::telemetry::{emit_log, parse_log_with, EdgeEvent};
use edgesense::Error;

#[derive(Parser)]
#[command(name = "edgesense", version, about = "Ground-effect edge detection from quadrotor telemetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one flight over a height edge and write its telemetry log.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Edge position, m (default: middle of the configured range).
        #[arg(long)]
        edge_x: Option<f64>,
        /// Height above the platform, m (default: the test height).
        #[arg(long)]
        height: Option<f64>,
        /// Approach angle, degrees (default: the test angle).
        #[arg(long)]
        angle: Option<f64>,
    },
    /// Write the fused spectral features of a log, and optionally its disturbance trace.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        disturbance: Option<PathBuf>,
    },
    /// Train the classifier on logs, or on simulated training flights when none are given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
        /// Per-epoch loss and accuracy as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Detect edges in a log with a float or compact model.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Detections as JSON (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune and quantize a trained model.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Size accounting as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the simulated comparison against the correlation baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory for summary.json and the CSV outputs.
        #[arg(long)]
        out_dir: PathBuf,
        /// Evaluate this model instead of training a new one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("edgesense: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("edgesense: {e}");
            ExitCode::from(1)
        }
    }
}

fn config(common: &Common) -> edgesense::Result<RunConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> edgesense::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_log(path: &Path, cfg: &RunConfig) -> edgesense::Result<edgesense::telemetry::FlightRecord> {
    parse_log_with(&std::fs::read(path)?, &cfg.drone)
}

/// Float model or compact model, told apart by the `format` field.
fn load_any_model(path: &Path) -> edgesense::Result<NetworkModel> {
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(compress::COMPACT_FORMAT) => CompactModel::from_file(&serde_json::from_value(value)?)?.to_model(),
        _ => nn::load_model(path),
    }
}

#[derive(Serialize)]
struct DetectOutput {
    edges: Vec<f64>,
    raw_transitions: Vec<f64>,
    ground_truth: Vec<EdgeEvent>,
    score: FlightScore,
}

fn run(command: Command) -> edgesense::Result<()> {
    match command {
        Command::Simulate { common, out, edge_x, height, angle } => {
            let cfg = config(&common)?;
            let [lo, hi] = cfg.scene.edge_range;
            let mission = MissionConfig {
                height: height.unwrap_or(cfg.test_height),
                approach_angle_deg: angle.unwrap_or(cfg.test_angle),
                ..cfg.mission.clone()
            };
            let record = fly_mission(&cfg.scene.scene(edge_x.unwrap_or(0.5 * (lo + hi))), &cfg.drone, &mission, cfg.seed)?;
            std::fs::write(out, emit_log(&record)?)?;
        }
        Command::Features { common, input, out, disturbance } => {
            let cfg = config(&common)?;
            let analysis = pipeline::analyze(&read_log(&input, &cfg)?, &cfg.pipeline)?;
            analysis.features.write_csv(BufWriter::new(File::create(out)?))?;
            if let Some(path) = disturbance {
                analysis.disturbance.write_csv(BufWriter::new(File::create(path)?))?;
            }
        }
        Command::Train { common, out, logs, history } => {
            let cfg = config(&common)?;
            let (model, hist) = if logs.is_empty() {
                let trained = eval::train_detector(&cfg)?;
                (trained.model, trained.history)
            } else {
                let mut windows = Vec::new();
                for path in &logs {
                    windows.extend(pipeline::analyze(&read_log(path, &cfg)?, &cfg.pipeline)?.windows(&cfg.window)?);
                }
                let model = eval::fitted_model(&cfg, &windows)?;
                let data = eval::prepare_all(&model, &windows)?;
                nn::train(&model, &data, &cfg.train)?
            };
            nn::save_model(&model, &out)?;
            if let Some(path) = history {
                write_json(&hist, Some(&path))?;
            }
        }
        Command::Detect { common, model, input, out } => {
            let cfg = config(&common)?;
            let model = load_any_model(&model)?;
            let analysis = pipeline::analyze(&read_log(&input, &cfg)?, &cfg.pipeline)?;
            let det = pipeline::detect(&model, &analysis, &cfg.pipeline)?;
            let gt = analysis.record.ground_truth.clone();
            let score = match_and_score(&det.edges, &gt, analysis.record.meta.speed, cfg.max_match);
            write_json(&DetectOutput { edges: det.edges, raw_transitions: det.raw, ground_truth: gt, score }, out.as_deref())?;
        }
        Command::Compress { common, model, out, report } => {
            let cfg = config(&common)?;
            let model = nn::load_model(&model)?;
            let data = if cfg.compression.fine_tune {
                eval::prepare_all(&model, &eval::training_windows(&cfg)?)?
            } else {
                Vec::new()
            };
            let compact = cfg.compression.apply(&model, &data, &cfg.train)?;
            compress::save_compact(&compact, &out)?;
            if let Some(path) = report {
                write_json(&compact.size_report(), Some(&path))?;
            }
        }
        Command::Eval { common, out_dir, model } => {
            let cfg = config(&common)?;
            let output = match model {
                Some(path) => eval::run_experiment_with_model(&cfg, &load_any_model(&path)?)?,
                None => eval::run_experiment(&cfg)?,
            };
            output.write(&out_dir)?;
            nn::save_model(&output.model, &out_dir.join("model.json"))?;
            let s = &output.summary;
            println!(
                "pipeline MAE {:.4} m, baseline MAE {:.4} m, improvement {:.1}%",
                s.pipeline.summary.mae_m, s.baseline.summary.mae_m, s.improvement_percent
            );
        }
    }
    Ok(())
}
