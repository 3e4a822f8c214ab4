mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hesam_core::{Fusion, HeadKind, MapMethod, ModelConfig, Pooling};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "hesam", version, about = "Nodule phantoms, SAM/HESAM training and attention maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase", tag = "command")]
enum Command {
    /// Generate train/test phantom datasets (NODV1).
    Phantom(PhantomArgs),
    /// Train a model; writes the model, checkpoint and run record.
    Train(TrainArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Export attention maps as PGM images.
    Map(MapArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference gradient verification in f64.
    Gradcheck(GradcheckArgs),
    /// Wilcoxon signed-rank test on two probability files.
    Stats(StatsArgs),
}

#[derive(Args, Debug, Serialize)]
struct PhantomArgs {
    /// Output directory; receives train.nodv and test.nodv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 916)]
    n_train: usize,
    #[arg(long, default_value_t = 229)]
    n_test: usize,
    /// 1, 3, 11 or 21.
    #[arg(long, default_value_t = 11)]
    channels: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum HeadArg {
    Cam,
    Sam,
    Hesam,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PoolArg {
    Gap,
    Gmp,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FusionArg {
    Sum,
    Concat,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = HeadArg::Hesam)]
    head: HeadArg,
    /// Pooling of the bottleneck into the high-level vector.
    #[arg(long, value_enum, default_value_t = PoolArg::Gmp)]
    hf_pool: PoolArg,
    /// Pooling of the final features into minor features.
    #[arg(long, value_enum, default_value_t = PoolArg::Gap)]
    fcf_pool: PoolArg,
    #[arg(long, value_enum, default_value_t = FusionArg::Sum)]
    fusion: FusionArg,
    /// Drop the residual stack (needs --unet-out 256).
    #[arg(long)]
    no_residual: bool,
    #[arg(long, default_value_t = 64)]
    unet_out: usize,
    #[arg(long)]
    unet_batchnorm: bool,
    /// Replace the high-level vector by zeros.
    #[arg(long)]
    zero_high_level: bool,
}

impl ModelArgs {
    fn config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            head: match self.head {
                HeadArg::Cam => HeadKind::Cam,
                HeadArg::Sam => HeadKind::Sam,
                HeadArg::Hesam => HeadKind::Hesam,
            },
            hf_pool: pool(self.hf_pool),
            fcf_pool: pool(self.fcf_pool),
            fusion: match self.fusion {
                FusionArg::Sum => Fusion::Sum,
                FusionArg::Concat => Fusion::Concat,
            },
            use_residual_stack: !self.no_residual,
            use_hf_branch: matches!(self.head, HeadArg::Hesam),
            unet_out_channels: self.unet_out,
            unet_batchnorm: self.unet_batchnorm,
            zero_high_level: self.zero_high_level,
        }
    }
}

fn pool(p: PoolArg) -> Pooling {
    match p {
        PoolArg::Gap => Pooling::Gap,
        PoolArg::Gmp => Pooling::Gmp,
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 30)]
    decay_period: usize,
    /// Test-set evaluation interval in epochs (0: last epoch only).
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> hesam_train::TrainConfig {
        hesam_train::TrainConfig {
            sgd: hesam_core::nn::SgdConfig {
                lr: self.lr,
                decay_factor: self.decay_factor,
                decay_period: self.decay_period,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
            },
            epochs: self.epochs,
            seed,
            eval_every: self.eval_every,
            eval_batch: 64,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory for model.hsmd, checkpoint.nack, record.json and epochs.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// k-fold cross-validation over train and test pooled instead of a single run.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write malignant-class probabilities, one per line.
    #[arg(long)]
    probs_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Cam,
    Gradcam,
    Sam,
    Hesam,
}

impl From<MethodArg> for MapMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cam => MapMethod::Cam,
            MethodArg::Gradcam => MapMethod::GradCam,
            MethodArg::Sam => MapMethod::Sam,
            MethodArg::Hesam => MapMethod::Hesam,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct MapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long = "class", default_value_t = 1)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
    /// Only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Write the centre input slice and the map side by side.
    #[arg(long)]
    composite: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GridArg {
    Table3,
    Table4,
    Fusion,
    Channels,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long, value_enum)]
    grid: GridArg,
    /// Channel modes; defaults to 11, or all four for the channel grid.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
    /// Directory with D{C}C/train.nodv and D{C}C/test.nodv; phantoms are
    /// generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 916)]
    n_train: usize,
    #[arg(long, default_value_t = 229)]
    n_test: usize,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Grid report path (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 3)]
    instances: usize,
    /// Parameter coordinates probed in the whole-model check.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Only the per-op checks.
    #[arg(long)]
    skip_model: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AltArg {
    TwoSided,
    Greater,
    Less,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    /// Whitespace-separated probabilities.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = AltArg::TwoSided)]
    alternative: AltArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match serde_json::to_string(&cli.command) {
        Ok(json) => println!("config {json}"),
        Err(e) => eprintln!("warning: cannot print config: {e}"),
    }
    let result = match &cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Map(a) => commands::map(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
