mod cmd;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbunet::eval::Aggregation;

#[derive(Parser)]
#[command(name = "gbunet", version, about = "Gated BERT-UNet: SpO2 estimation from respiration")]
struct Cli {
    /// Log filter (`error`, `warn`, `info`, `debug`, or an env_logger spec).
    #[arg(long, global = true, env = "GBUNET_LOG", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RSP1 dataset.
    Synth(SynthArgs),
    /// Train a model variant and write a GBU1 checkpoint.
    Train(TrainArgs),
    /// Build a gate map from a pretrained backbone.
    Gatemap(GatemapArgs),
    /// Evaluate a checkpoint on 240-s segments.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's or config's model summary.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct ConfigArg {
    /// Run configuration JSON.
    #[arg(long, env = "GBUNET_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator profile JSON; defaults apply to omitted keys.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// backbone, cnn, varaug or gated.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Also write `<out stem>.eNNNN.gbu` every K epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint saved with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct GatemapArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// identity, manual or grad-sim.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Variant override applied to the config before the hash check.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides the map stored in the checkpoint.
    #[arg(long)]
    pub gate_map: Option<PathBuf>,
    /// Accessible variable for the grouped distribution block.
    #[arg(long)]
    pub group_by: Option<String>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    /// Directory for per-night TSV dumps.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggregationArg {
    Segment,
    Night,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Segment => Aggregation::Segment,
            AggregationArg::Night => Aggregation::Night,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Scale {
    Tiny,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scale::Tiny)]
    pub scale: Scale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the composed-model cases.
    #[arg(long)]
    pub kernels_only: bool,
    /// Write the per-case results as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect; without it the config's model is described.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub variant: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Synth(a) => cmd::synth(a),
        Command::Train(a) => cmd::train(a),
        Command::Gatemap(a) => cmd::gatemap(a),
        Command::Eval(a) => cmd::eval(a),
        Command::Gradcheck(a) => cmd::gradcheck(a),
        Command::Inspect(a) => cmd::inspect(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
