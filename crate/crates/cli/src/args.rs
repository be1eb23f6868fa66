use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sonic::data::{MaskKind, SceneKind};
use sonic::inpaint::EncoderInput;
use sonic::latent::LatentCodec;
use sonic::seedopt::{OptimDomain, SpectralScaling};

#[derive(Parser, Debug)]
#[command(
    name = "sonic",
    version,
    about = "Seed-optimized inpainting with toy flow models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate scenes, masks and a manifest.
    MakeData(MakeDataArgs),
    /// Train a flow model on a manifest.
    Train(TrainArgs),
    /// Inpaint one image or every manifest entry.
    Inpaint(InpaintArgs),
    /// Run the domain x gradient-masking grid plus the ground-truth encoder row.
    Ablate(AblateArgs),
    /// Compare linearized, unrolled and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Compute metrics of inpainting results against ground truth.
    Eval(EvalArgs),
    /// Re-run a command from its config snapshot.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = MaskKind::HalfBox)]
    pub mask: MaskKind,
    /// Comma-separated scene kinds, cycled over instance ids.
    #[arg(long, value_delimiter = ',', default_values_t = SceneKind::ALL)]
    pub scenes: Vec<SceneKind>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Train with one class per scene kind (enables guidance).
    #[arg(long)]
    pub conditional: bool,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub final_lr_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub class_dropout: f64,
    /// Seed of the initial weights.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Seed of the training stream (batches, noise, times).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Encoder {
    NnFill,
    GroundTruth,
}

impl From<Encoder> for EncoderInput {
    fn from(e: Encoder) -> Self {
        match e {
            Encoder::NnFill => EncoderInput::NnFill,
            Encoder::GroundTruth => EncoderInput::GroundTruth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Unnormalized,
    Unitary,
}

impl From<Scaling> for SpectralScaling {
    fn from(s: Scaling) -> Self {
        match s {
            Scaling::Unnormalized => SpectralScaling::Unnormalized,
            Scaling::Unitary => SpectralScaling::Unitary,
        }
    }
}

/// Sampler, guidance and optimizer settings shared by every command that
/// runs the inpainting pipeline.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PipelineFlags {
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = OptimDomain::Spectral)]
    pub domain: OptimDomain,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub grad_mask: Toggle,
    #[arg(long, default_value_t = LatentCodec::Identity)]
    pub codec: LatentCodec,
    /// Number of Euler steps.
    #[arg(long = "T", default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub cfg_scale: f64,
    #[arg(long, default_value_t = 3.0)]
    pub lr: f64,
    /// Seed of the initial Gaussian sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Encoder::NnFill)]
    pub encoder: Encoder,
    #[arg(long, value_enum, default_value_t = Scaling::Unnormalized)]
    pub spectral_scaling: Scaling,
    /// Guidance class. Defaults to the scene kind of manifest entries for
    /// conditional models and to the null class otherwise.
    #[arg(long)]
    pub class: Option<u32>,
}

/// Either a single image/mask pair or a manifest.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InputFlags {
    #[arg(long, conflicts_with_all = ["image", "mask"], required_unless_present = "image")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub mask: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InpaintArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputFlags,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    /// SSIM window for the region metrics.
    #[arg(long, default_value_t = 3)]
    pub ssim_window: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputFlags,
    /// Manifest entry to check.
    #[arg(long, default_value_t = 0)]
    pub id: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    /// Number of sampled coordinates for the finite-difference check.
    #[arg(long, default_value_t = 16)]
    pub fd_samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub fd_step: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Output directory of an `inpaint` run.
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub input: InputFlags,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub ssim_window: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `run.json` written by an earlier command.
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Output directory for the re-run; the snapshot's own directory is
    /// never overwritten.
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn out_dir(&self) -> &std::path::Path {
        match self {
            Command::MakeData(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Inpaint(a) => &a.out,
            Command::Ablate(a) => &a.out,
            Command::Gradcheck(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Replay(a) => &a.out,
        }
    }

    pub fn set_out_dir(&mut self, out: PathBuf) {
        match self {
            Command::MakeData(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Inpaint(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::Gradcheck(a) => a.out = out,
            Command::Eval(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }
}
