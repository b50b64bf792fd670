//! `igvlm` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use igvlm::config::{FusionStrategy, Preset, RunConfig};
use igvlm::{Error, Result};

#[derive(Parser)]
#[command(name = "igvlm", version, about = "Instruction-guided dual-branch vision encoder at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-questions-per-image benchmark.
    Gen(GenArgs),
    /// Check a dataset against the benchmark's structural rules.
    Validate(ValidateArgs),
    /// Stage 0: contrastive pretraining of backbone and text encoder.
    Pretrain(TrainArgs),
    /// Stage 1 or 2 multiple-choice training.
    Train(StageArgs),
    /// Predict an option for every question of a dataset.
    Eval(EvalArgs),
    /// At-least-n-of-four scores with random baselines.
    Score(ScoreArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
    /// Patch relevance maps for one question.
    Saliency(SaliencyArgs),
    /// Pairwise cosine similarity of question embeddings.
    Diversity(DiversityArgs),
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training hyper-parameter preset.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Two-layer zero-initialised projection instead of linear Z.
    #[arg(long)]
    pub zero_ffn: bool,
    /// Disable the instruction-conditioned layer norms.
    #[arg(long)]
    pub no_adaln: bool,
    /// Replace y_0 by zeros inside the fusion.
    #[arg(long)]
    pub no_static: bool,
    /// Static baseline: skip the dynamic branch entirely.
    #[arg(long)]
    pub no_dynamic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Adaln,
    Mof,
    Cross,
}

impl ConfigArgs {
    /// File (or defaults), then preset, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Parameter(format!("config {}: {e}", p.display())))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            let seeds: Vec<u64> = (0..=2).map(|s| run.training.stage(s).map(|c| c.seed)).collect::<Result<_>>()?;
            run.training = igvlm::config::TrainingConfig::preset(match p {
                PresetArg::Toy => Preset::Toy,
                PresetArg::Paper => Preset::Paper,
            });
            for (s, seed) in seeds.into_iter().enumerate() {
                run.training.stage_mut(s as u8)?.seed = seed;
            }
        }
        if let Some(seed) = self.seed {
            run.reseed(seed);
        }
        if let Some(f) = self.fusion {
            run.model.fusion.strategy = match f {
                FusionArg::Adaln => FusionStrategy::Adaln,
                FusionArg::Mof => FusionStrategy::Mof,
                FusionArg::Cross => FusionStrategy::Cross,
            };
        }
        run.model.fusion.zero_ffn |= self.zero_ffn;
        run.model.adaln &= !self.no_adaln;
        run.model.static_branch &= !self.no_static;
        run.model.dynamic_branch &= !self.no_dynamic;
        run.validate()?;
        Ok(run)
    }
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub images: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ValidateArgs {
    /// Dataset directory or its JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to write; metrics and manifest go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue an interrupted run of the same stage from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many optimizer steps in total; the checkpoint can be
    /// resumed.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args)]
pub struct StageArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Predictions JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Levels to report, e.g. `--n 1,4`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4])]
    pub n: Vec<usize>,
    /// Score CSV; the category breakdown goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Sampled coordinates per parameter tensor.
    #[arg(long, default_value_t = 5)]
    pub per_tensor: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Static,
    Conditioned,
    Both,
}

#[derive(Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub image_id: String,
    #[arg(long, default_value_t = 0)]
    pub question: usize,
    /// Option whose logit is explained; defaults to the correct answer.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, value_enum, default_value_t = BranchArg::Both)]
    pub branch: BranchArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DiversityArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Text encoder to use; a freshly seeded one otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Write the 4×4 matrix of this record too.
    #[arg(long)]
    pub image_id: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Score(a) => commands::score(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::Diversity(a) => commands::diversity(&a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
