use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multimodal IMU + skeleton action recognition: synthetic data, preprocessing,
/// three-phase training, evaluation, per-participant F1 and DTW analysis.
///
/// Every command that takes --out writes manifest.json there. Values may also
/// come from a `key = value` file given with --config; flags win over the file.
/// MMEVIT_THREADS caps worker threads (0 = one per core).
#[derive(Debug, Parser)]
#[command(name = "rehab-har", version, propagate_version = true)]
pub struct Cli {
    /// `key = value` file; keys are long flag names, or model keys such as
    /// imu.vit.depth for commands that accept --set.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Normalize and window IMU segments into a tensor checkpoint.
    PreprocessImu(PreprocessImuArgs),
    /// Render skeleton sequences into Gaussian heatmap volumes.
    PreprocessSkel(PreprocessSkelArgs),
    /// Train the IMU branch, the skeleton branch, the fusion head, or all three.
    Train(TrainArgs),
    /// Score a trained model on one part of the split.
    Eval(EvalArgs),
    /// Pairwise multivariate DTW and label-merge suggestions.
    Dtw(DtwArgs),
    /// Per-participant, per-class F1 from a predictions file.
    F1(F1Args),
    /// Write a label map that merges label pairs.
    MergeLabels(MergeArgs),
    /// Segment-length statistics of a corpus.
    Describe(DescribeArgs),
    /// Re-run the command recorded in a manifest and compare its outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::PreprocessImu(_) => "preprocess-imu",
            Command::PreprocessSkel(_) => "preprocess-skel",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Dtw(_) => "dtw",
            Command::F1(_) => "f1",
            Command::MergeLabels(_) => "merge-labels",
            Command::Describe(_) => "describe",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Participants without impairment.
    #[arg(long, default_value_t = 8)]
    pub nd: usize,
    /// Participants after stroke.
    #[arg(long, default_value_t = 4)]
    pub stroke: usize,
    #[arg(long, default_value_t = 8)]
    pub sessions: usize,
    /// Segments per label per session.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Noise scale of the ND group.
    #[arg(long, default_value_t = 0.3)]
    pub noise_nd: f64,
    /// Noise scale of the Stroke group.
    #[arg(long, default_value_t = 1.0)]
    pub noise_stroke: f64,
    /// Coupled label pair `A:B` (repeatable); defaults to 2:3 and 7:8.
    #[arg(long, value_name = "A:B")]
    pub couple: Vec<String>,
    /// Generate no coupled pairs.
    #[arg(long, conflicts_with = "couple")]
    pub no_couple: bool,
    /// Amplitude of the motif separating a coupled label from its partner.
    #[arg(long, default_value_t = 0.6)]
    pub coupling_gap: f64,
    /// IMU channels carrying that motif.
    #[arg(long, default_value_t = 3)]
    pub coupled_channels: usize,
    /// Shortest IMU segment to generate.
    #[arg(long, default_value_t = 120)]
    pub min_imu_len: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size layers (embedding 256, 56x56 grid, 48 frames).
    Default,
    /// Desk-scale layers (embedding 32, 16x16 grid, 8 frames).
    Small,
}

/// Model shape shared by every command that builds tensors.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Model override `key=value` (repeatable), e.g. imu.vit.depth=4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PreprocessImuArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Window length in samples.
    #[arg(long, default_value_t = 120)]
    pub window: usize,
    /// Hop between window starts.
    #[arg(long, default_value_t = 60)]
    pub stride: usize,
    #[arg(long, value_enum, default_value_t = NormScopeArg::Segment)]
    pub norm_scope: NormScopeArg,
    /// Added to the standard deviation before dividing.
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Reflect-pad segments shorter than the window.
    #[arg(long)]
    pub pad_short: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormScopeArg {
    Segment,
    Corpus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Uniform,
    FirstOfSubsegment,
    RandomOfSubsegment,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Horizontal flip probability.
    #[arg(long, default_value_t = 0.5)]
    pub flip_prob: f64,
    /// Crop side as a fraction of the grid; 1 disables cropping.
    #[arg(long, default_value_t = 0.9)]
    pub crop: f64,
    /// Frame sampling policy.
    #[arg(long, value_enum, default_value_t = PolicyArg::Uniform)]
    pub policy: PolicyArg,
    /// Draw flip and crop per frame instead of per clip.
    #[arg(long)]
    pub per_frame: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessSkelArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Heatmap side length.
    #[arg(long, default_value_t = 56)]
    pub grid: usize,
    /// Gaussian spread.
    #[arg(long, default_value_t = 0.6)]
    pub sigma: f64,
    /// Use 2 sigma^2 instead of 2 sigma in the exponent.
    #[arg(long)]
    pub sigma_squared: bool,
    /// Frames per volume.
    #[arg(long, default_value_t = 48)]
    pub frames: usize,
    /// Bounding-box padding fraction.
    #[arg(long, default_value_t = 0.1)]
    pub bbox_pad: f64,
    /// Keypoints at or below this confidence do not shape the bounding box.
    #[arg(long, default_value_t = 0.3)]
    pub conf_threshold: f64,
    #[command(flatten)]
    pub augment: AugmentArgs,
    /// Render without flip, crop or random frame choice.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only this participant (repeatable).
    #[arg(long)]
    pub participant: Vec<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    All,
    Imu,
    Skeleton,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    All,
    Nd,
    Stroke,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitModeArg {
    Segment,
    Participant,
}

/// Train/valid/test partition; train and eval must agree on it.
#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    #[arg(long, value_enum, default_value_t = SplitModeArg::Segment)]
    pub split_mode: SplitModeArg,
    /// Train, valid and test weights.
    #[arg(long, value_name = "T,V,E", default_value = "7,2,1")]
    pub split_ratios: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = PhaseArg::All)]
    pub phase: PhaseArg,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Label map from merge-labels; defaults to the nine labels.
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Train and validate on one participant group only.
    #[arg(long, value_enum, default_value_t = GroupArg::All)]
    pub group: GroupArg,
    /// Defaults to 32.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Defaults to 40 (5 with --preset small).
    #[arg(long)]
    pub imu_epochs: Option<usize>,
    /// Defaults to 1e-5 (2e-3 with --preset small).
    #[arg(long)]
    pub imu_lr: Option<f64>,
    /// Defaults to 100 (5 with --preset small).
    #[arg(long)]
    pub skeleton_epochs: Option<usize>,
    /// Defaults to 1e-4 (1e-3 with --preset small).
    #[arg(long)]
    pub skeleton_lr: Option<f64>,
    /// Defaults to 10 (5 with --preset small).
    #[arg(long)]
    pub head_epochs: Option<usize>,
    /// Defaults to 1e-3.
    #[arg(long)]
    pub head_lr: Option<f64>,
    #[command(flatten)]
    pub augment: AugmentArgs,
    /// Shuffle training labels among segments (control run).
    #[arg(long)]
    pub shuffle_labels: bool,
    /// IMU branch checkpoint for --phase head.
    #[arg(long, value_name = "FILE")]
    pub imu_checkpoint: Option<PathBuf>,
    /// Skeleton branch checkpoint for --phase head.
    #[arg(long, value_name = "FILE")]
    pub skeleton_checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    MeanSoftmax,
    MajorityVote,
    WindowLevel,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory of a `train` run.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = PartArg::Test)]
    pub part: PartArg,
    #[arg(long, value_enum, default_value_t = AggregationArg::MeanSoftmax)]
    pub aggregation: AggregationArg,
    /// Score one participant group only.
    #[arg(long, value_enum, default_value_t = GroupArg::All)]
    pub group: GroupArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Imu,
    Skeleton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ChannelModeArg {
    Matched,
    Cross,
}

#[derive(Debug, Args)]
pub struct DtwArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModalityArg::Imu)]
    pub modality: ModalityArg,
    #[arg(long, value_enum, default_value_t = ChannelModeArg::Matched)]
    pub mode: ChannelModeArg,
    /// Sakoe-Chiba band half-width; unbanded when absent.
    #[arg(long)]
    pub band: Option<usize>,
    /// Resample every series to this length; 0 keeps native lengths.
    #[arg(long, default_value_t = 64)]
    pub resample: usize,
    /// Merge pairs whose mean distance is at most this fraction of the cross-label mean.
    #[arg(long, default_value_t = 0.75)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = GroupArg::All)]
    pub group: GroupArg,
    /// Use sessions 1..=N only; 0 uses all.
    #[arg(long, default_value_t = 0)]
    pub max_session: usize,
    /// Also write long-format CSVs for external plotting.
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct F1Args {
    /// predictions.csv written by eval.
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    /// participants.csv of the corpus.
    #[arg(long, value_name = "FILE")]
    pub participants: PathBuf,
    /// Also write a long-format CSV for external plotting.
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Label pair `A:B` to merge (repeatable); defaults to 2:3 and 7:8.
    #[arg(long, value_name = "A:B")]
    pub pair: Vec<String>,
    /// merges.csv written by dtw; its pairs are merged too.
    #[arg(long, value_name = "FILE")]
    pub from_dtw: Option<PathBuf>,
    /// Label map to merge into; defaults to the nine labels.
    #[arg(long, value_name = "FILE")]
    pub base: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// Corpus directory.
    #[arg(value_name = "DIR")]
    pub data: PathBuf,
    /// Print CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
    /// Also write describe.csv and a manifest here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// manifest.json of the run to repeat.
    #[arg(value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// Fresh output directory for the repeated run.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
