//! Command-line flags. Every default here is the documented default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use counterpoint::pianoroll::SplitName;
use counterpoint::{AnnealSchedule, OrderingMode, Resolution};

#[derive(Debug, Parser)]
#[command(
    name = "counterpoint",
    version,
    about = "Convolutional orderless NADE for four-voice chorales",
    args_override_self = true,
    after_help = "Every subcommand accepts --config FILE: a JSON object whose keys mirror the long \
                  flags (e.g. {\"steps\": 200, \"seed\": 3}). Flags given on the command line win."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Generate new scores from scratch.
    Sample(SampleArgs),
    /// Complete a partial score, keeping the fixed cells.
    Inpaint(InpaintArgs),
    /// Framewise NLL of a dataset split.
    Evaluate(EvaluateArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Nade,
    GibbsIndependent,
    GibbsAncestral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ResolutionArg {
    Quarter,
    Eighth,
    Sixteenth,
}

impl From<ResolutionArg> for Resolution {
    fn from(r: ResolutionArg) -> Self {
        match r {
            ResolutionArg::Quarter => Resolution::Quarter,
            ResolutionArg::Eighth => Resolution::Eighth,
            ResolutionArg::Sixteenth => Resolution::Sixteenth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Valid => SplitName::Valid,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Random,
    Chronological,
}

impl From<ModeArg> for OrderingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => OrderingMode::Random,
            ModeArg::Chronological => OrderingMode::Chronological,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file of flag values; command-line flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Canonical dataset JSON.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/train")]
    pub outdir: PathBuf,
    #[arg(long, value_enum, default_value_t = ResolutionArg::Quarter)]
    pub resolution: ResolutionArg,
    /// Use only the first N training pieces.
    #[arg(long, value_name = "N")]
    pub train_pieces: Option<usize>,
    /// Convolution layers L.
    #[arg(long, default_value_t = 16)]
    pub layers: usize,
    /// Hidden channels H.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel_time: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel_pitch: usize,
    /// Crop length T in timesteps.
    #[arg(long, default_value_t = 32)]
    pub crop_length: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_epsilon: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Checkpoint and validation cadence; 0 disables both.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 4)]
    pub validation_pieces: usize,
    #[arg(long, default_value_t = 1)]
    pub validation_orderings: usize,
    /// Stop after this many validations without improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Stop once the trailing mean loss drops below this value.
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub loss_window: usize,
    /// Parameter precision.
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    /// Record elapsed seconds in the log (makes logs non-reproducible).
    #[arg(long)]
    pub log_wallclock: bool,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, value_enum, default_value_t = SamplerArg::Nade)]
    pub sampler: SamplerArg,
    /// Gibbs steps N; defaults to I·T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Probability of keeping each cell between ancestral Gibbs steps.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = AnnealSchedule::DEFAULT_ALPHA_MIN)]
    pub alpha_min: f64,
    #[arg(long, default_value_t = AnnealSchedule::DEFAULT_ALPHA_MAX)]
    pub alpha_max: f64,
    /// Fraction of the N steps over which the masking probability anneals.
    #[arg(long, default_value_t = AnnealSchedule::DEFAULT_ETA)]
    pub eta: f64,
    /// Write the per-step sampler trace as JSON lines.
    #[arg(long)]
    pub trace: bool,
    /// MIDI tempo in quarter notes per minute.
    #[arg(long, default_value_t = counterpoint::pianoroll::DEFAULT_TEMPO_QPM)]
    pub tempo: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "runs/sample")]
    pub outdir: PathBuf,
    /// Timesteps T per sample.
    #[arg(long, default_value_t = 32)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = ResolutionArg::Quarter)]
    pub resolution: ResolutionArg,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Score the samples under the model with this many orderings (0 skips scoring).
    #[arg(long, default_value_t = 0)]
    pub score_orderings: usize,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "runs/inpaint")]
    pub outdir: PathBuf,
    /// Partial score JSON; `null` cells are filled in.
    #[arg(long, value_name = "FILE", conflicts_with = "data")]
    pub score: Option<PathBuf>,
    /// Take the input from a dataset piece instead of a score file.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub piece: usize,
    /// First frame of the dataset excerpt.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Frames of the dataset excerpt; defaults to the rest of the piece.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long, value_enum, default_value_t = ResolutionArg::Quarter)]
    pub resolution: ResolutionArg,
    /// Cells to keep, e.g. `voice:bass,frames:0-3,every:4`. Defaults to the known cells of --score.
    #[arg(long, value_name = "SPEC")]
    pub fix: Option<String>,
    /// Keep a whole voice (repeatable); unioned with --fix.
    #[arg(long, value_name = "VOICE")]
    pub fix_voice: Vec<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = ResolutionArg::Quarter)]
    pub resolution: ResolutionArg,
    /// Ensemble size M.
    #[arg(long, default_value_t = 5)]
    pub orderings: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Random)]
    pub mode: ModeArg,
    /// Evaluate only the first N pieces.
    #[arg(long)]
    pub max_pieces: Option<usize>,
    /// Evaluate only the first N frames of each piece.
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long, default_value = "runs/evaluate")]
    pub outdir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[command(flatten)]
    pub common: Common,
}
