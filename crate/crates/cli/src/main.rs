use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod bench_cmds;
mod common;
mod model_cmds;
mod train_cmds;

use common::CliError;

#[derive(Parser)]
#[command(name = "fuselab", version, about = "Fused low-rank adapter lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random base checkpoint.
    GenModel(GenModelArgs),
    /// Initialise adapters and write the fused checkpoint.
    Fuse(FuseArgs),
    /// Re-derive a fused checkpoint and compare it with the reference forward.
    CheckEquiv(CheckEquivArgs),
    /// Adapter parameter count for a model and variant.
    CountParams(CountParamsArgs),
    /// Finite-difference check of adapter gradients.
    GradCheck(GradCheckArgs),
    /// Train adapters on a synthetic task.
    TrainToy(TrainToyArgs),
    /// Per-token decode latency of a single block.
    BenchLayer(BenchLayerArgs),
    /// Time-to-first-token and time-per-output-token of a whole model.
    BenchModel(BenchModelArgs),
}

#[derive(Args, Clone, Default)]
pub struct ModelArgs {
    /// Model preset: tiny, 1B, 3B or 8B.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON run config; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct AdapterArgs {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// all, mha_only or ffn_only.
    #[arg(long)]
    pub placement: Option<String>,
    /// forward_random_backward_zero or both_random.
    #[arg(long)]
    pub init: Option<String>,
    /// zFLoRA merge before the head: truncate or repeat_add.
    #[arg(long)]
    pub merge: Option<String>,
    /// zFLoRA expand after the embedding: zero_pad or split_average.
    #[arg(long)]
    pub expand: Option<String>,
    /// Drop the last block's forward adapter on down when truncating.
    #[arg(long)]
    pub drop_dead_adapter: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GenModelArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preset whose shapes are actually stored; defaults to tiny when the
    /// header model is too large to materialise.
    #[arg(long)]
    pub payload_preset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CheckEquivArgs {
    #[arg(long)]
    pub fused: PathBuf,
    /// Base checkpoint; defaults to the path recorded at fuse time.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub atol: f64,
    #[arg(long, default_value_t = 4)]
    pub prompts: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CountParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[arg(long)]
    pub coords: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainToyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    /// copy, reverse or modular_add.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub dataset: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// Exit with a verification failure unless the final loss is below this.
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchLayerArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub requests: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchModelArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long)]
    pub requests: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenModel(a) => model_cmds::gen_model(a),
        Cmd::Fuse(a) => model_cmds::fuse(a),
        Cmd::CheckEquiv(a) => model_cmds::check_equiv(a),
        Cmd::CountParams(a) => model_cmds::count_params(a),
        Cmd::GradCheck(a) => train_cmds::grad_check(a),
        Cmd::TrainToy(a) => train_cmds::train_toy(a),
        Cmd::BenchLayer(a) => bench_cmds::bench_layer(a),
        Cmd::BenchModel(a) => bench_cmds::bench_model(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
