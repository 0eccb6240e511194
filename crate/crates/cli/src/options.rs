use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inloc_core::incremental::{AdaptationConfig, AlignPath};

#[derive(Debug, Parser)]
#[command(
    name = "inloc",
    version,
    about = "Domain-incremental Wi-Fi fingerprint localization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario (building, devices, drift) into a directory.
    Generate(GenerateArgs),
    /// Train a fresh model on the base device's offline data.
    Pretrain(PretrainArgs),
    /// Supervised onboarding of a device the model has not seen.
    Onboard(OnboardArgs),
    /// Two-stage unsupervised adaptation for a known device at some epoch.
    Adapt(AdaptArgs),
    /// Evaluate a run on every test split, with forgetting and pseudo-label history.
    Evaluate(EvaluateArgs),
    /// Render an evaluation as report.txt and report.tsv.
    Report(ReportArgs),
    /// Finite-difference check of every loss term on a small seeded model.
    Gradcheck(GradcheckArgs),
    /// Pretrain, onboard every device, adapt every later epoch, and report.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Toy,
    Building1,
    Building2,
}

impl PresetArg {
    pub fn preset(self) -> inloc_core::simgen::Preset {
        use inloc_core::simgen::Preset;
        match self {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Building1 => Preset::Building1,
            PresetArg::Building2 => Preset::Building2,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "toy")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Collection epochs, including the offline epoch 0.
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    /// Use only the first N devices of the roster.
    #[arg(long)]
    pub devices: Option<usize>,
    /// Samples per RP for every split.
    #[arg(long)]
    pub samples_per_rp: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub drift_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignPathArg {
    Monitor,
    Stage1,
    Encoder,
}

/// Training settings. Unset values keep those of the parent checkpoint
/// (or the defaults for a new model).
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML file with a full training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model seed (initialization, noise buffer, shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub onboard_epochs: Option<usize>,
    /// Epochs for each adaptation stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub memory_capacity: Option<usize>,
    #[arg(long, value_enum)]
    pub align_path: Option<AlignPathArg>,
    /// Disable the prototype memory and alignment loss.
    #[arg(long)]
    pub no_cesa: bool,
    /// Draw fresh noise per sample instead of the per-domain buffer.
    #[arg(long)]
    pub no_disentangle: bool,
    /// Skip encoder adaptation before pseudo labelling.
    #[arg(long)]
    pub no_stage1: bool,
    /// Update the decoder in stage 1 as well.
    #[arg(long)]
    pub stage1_trains_decoder: bool,
}

impl TrainArgs {
    pub fn apply(&self, base: AdaptationConfig) -> anyhow::Result<AdaptationConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?
            }
            None => base,
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.pretrain_epochs {
            c.pretrain_epochs = v;
        }
        if let Some(v) = self.onboard_epochs {
            c.onboard_epochs = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.lr {
            c.adam.lr = v;
        }
        if let Some(v) = self.memory_capacity {
            c.memory_capacity = v;
        }
        if let Some(v) = self.align_path {
            c.align_path = match v {
                AlignPathArg::Monitor => AlignPath::Monitor,
                AlignPathArg::Stage1 => AlignPath::Stage1,
                AlignPathArg::Encoder => AlignPath::Encoder,
            };
        }
        if self.no_cesa {
            c.ablation.cesa = false;
        }
        if self.no_disentangle {
            c.ablation.disentangle = false;
        }
        if self.no_stage1 {
            c.ablation.stage1 = false;
        }
        if self.stage1_trains_decoder {
            c.stage1_trains_decoder = true;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Scenario directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct OnboardArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory holding the starting checkpoint.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub device: String,
    #[arg(long, default_value_t = 0)]
    pub epoch: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub device: String,
    #[arg(long)]
    pub epoch: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `evaluate`.
    #[arg(long)]
    pub from: PathBuf,
    /// Defaults to the evaluation directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}
