//! `mxlstm`: synthesize scenes, train, evaluate, analyze gaze statistics and
//! check gradients.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mxlstm::data::SyntheticKind;

#[derive(Parser)]
#[command(name = "mxlstm", version, about = "Joint trajectory and head-pose forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene as annotation TSV.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus per-epoch losses.
    Train(TrainArgs),
    /// Forecast held-out data and write metrics CSV.
    Eval(EvalArgs),
    /// Head-pose vs walking-direction statistics.
    Analyze(AnalyzeArgs),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// linear, turn_with_gaze, conversational_group or crossing.
    #[arg(long)]
    pub kind: SyntheticKind,
    #[arg(long, default_value_t = 3)]
    pub agents: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Seconds between frames.
    #[arg(long, default_value_t = 0.4)]
    pub timestep: f64,
    #[arg(long, default_value_t = 0.8)]
    pub speed_min: f64,
    #[arg(long, default_value_t = 1.6)]
    pub speed_max: f64,
    /// Positional noise, meters.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 10.0)]
    pub area: f64,
    /// Steps the head turns ahead of the body (turn_with_gaze).
    #[arg(long, default_value_t = 3)]
    pub gaze_lead: usize,
    /// Head-pose noise added to every pan, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub pan_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Input annotation files.
#[derive(Args)]
pub struct DataArgs {
    /// Annotation TSV files; each is one scene.
    #[arg(long = "data", required = true, num_args = 1..)]
    pub paths: Vec<PathBuf>,
    /// Frame rate of the files; downsampled to 2.5 fps.
    #[arg(long, default_value_t = 2.5)]
    pub fps: f64,
}

/// Overrides for config-file keys; unset flags keep the file's value.
#[derive(Args, Default)]
pub struct ConfigFlags {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long = "lr", alias = "learning-rate")]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub rmsprop_decay: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub l2_weight: Option<String>,
    /// Global gradient-norm cap; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "obs")]
    pub obs_len: Option<String>,
    #[arg(long = "pred")]
    pub pred_len: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    /// mean or sum.
    #[arg(long)]
    pub batch_reduction: Option<String>,
    /// Frames between training windows, or `auto` for the prediction length.
    #[arg(long)]
    pub window_stride: Option<String>,
    #[arg(long)]
    pub hidden_size: Option<String>,
    #[arg(long)]
    pub embedding_size: Option<String>,
    /// Pooling grid cells per side.
    #[arg(long)]
    pub grid_cells: Option<String>,
    /// Pooling grid side, meters.
    #[arg(long)]
    pub grid_size: Option<String>,
    #[arg(long = "aperture-deg")]
    pub frustum_aperture_deg: Option<String>,
    #[arg(long)]
    pub frustum_depth: Option<String>,
    /// Distance of the gaze anchor from the head, meters.
    #[arg(long)]
    pub anchor_distance: Option<String>,
}

impl ConfigFlags {
    /// `(config key, value)` for every flag given, in config-key order.
    pub fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("learning_rate", &self.learning_rate),
            ("rmsprop_decay", &self.rmsprop_decay),
            ("epsilon", &self.epsilon),
            ("epochs", &self.epochs),
            ("l2_weight", &self.l2_weight),
            ("grad_clip", &self.grad_clip),
            ("seed", &self.seed),
            ("obs_len", &self.obs_len),
            ("pred_len", &self.pred_len),
            ("batch_size", &self.batch_size),
            ("batch_reduction", &self.batch_reduction),
            ("window_stride", &self.window_stride),
            ("variant", &self.variant),
            ("hidden_size", &self.hidden_size),
            ("embedding_size", &self.embedding_size),
            ("grid_cells", &self.grid_cells),
            ("grid_size", &self.grid_size),
            ("frustum_aperture_deg", &self.frustum_aperture_deg),
            ("frustum_depth", &self.frustum_depth),
            ("anchor_distance", &self.anchor_distance),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Rollout {
    /// Feed back the predicted mean (deterministic).
    Mean,
    /// Feed back a draw from the predicted distribution.
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Baseline {
    /// Returns the ground truth.
    Oracle,
    /// Repeats the last observed step.
    ConstantVelocity,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a reference forecaster instead of a checkpoint.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 8)]
    pub obs: usize,
    /// Prediction horizons in frames; several give a horizon sweep on
    /// shared observation windows.
    #[arg(long, value_delimiter = ',', default_value = "12")]
    pub horizon: Vec<usize>,
    /// Head-pose noise added to the observed pans, degrees; several give a
    /// noise sweep.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub sigma: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Rollout::Mean)]
    pub rollout: Rollout,
    /// Sampled rollouts per point (with `--rollout sample`).
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames between evaluation windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Steps slower than this (m/s) are left out of the discrepancy profile.
    #[arg(long, default_value_t = 0.45)]
    pub speed_floor: f64,
    /// Velocity bins for the binned correlation.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// A variant name, or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bad arguments discovered after parsing; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
