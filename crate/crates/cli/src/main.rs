mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motseg_core::datamodel::FlowSource;
use motseg_core::Error;

/// Moving-object segmentation from RGB frames and optical flow.
#[derive(Parser, Debug)]
#[command(name = "motseg", version, about)]
pub struct Cli {
    /// Seed for every random choice; overrides config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate motion masks from scene records (calibration, poses, boxes).
    Annotate(AnnotateArgs),
    /// Render a synthetic dataset with exact flow and masks.
    Synth(SynthArgs),
    /// Train a network variant.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset.
    Eval(EvalArgs),
    /// Time inference of network variants.
    Bench(BenchArgs),
    /// Write a panel of image, flow, mask and prediction rows for one frame.
    Viz(VizArgs),
    /// Print parameter counts per variant.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FlowChoice {
    Auto,
    Exact,
    Estimated,
}

impl From<FlowChoice> for FlowSource {
    fn from(c: FlowChoice) -> Self {
        match c {
            FlowChoice::Auto => FlowSource::Auto,
            FlowChoice::Exact => FlowSource::Exact,
            FlowChoice::Estimated => FlowSource::Estimated,
        }
    }
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// Dataset root; every `<sequence>/scene.toml` under it is annotated.
    #[arg(long, env = "MOTSEG_DATA")]
    pub root: PathBuf,
    /// Annotate only these sequences.
    #[arg(long = "sequence")]
    pub sequences: Vec<String>,
    /// Also write red-tinted overlays to `<sequence>/review/`.
    #[arg(long)]
    pub review: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Sampler settings as TOML; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Mark disoccluded pixels as ignore (255) in the masks.
    #[arg(long)]
    pub ignore_disocclusions: bool,
    /// Make the estimated flow identical to the exact flow.
    #[arg(long)]
    pub no_flow_noise: bool,
    /// Prefix of sequence directory names.
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset root.
    #[arg(long, env = "MOTSEG_DATA")]
    pub data: PathBuf,
    /// Validation dataset root; selects the best checkpoint.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Training settings as TOML; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Encoder size: tiny, desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    /// Recurrent stage positions for multistage variants, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "auto")]
    pub flow: FlowChoice,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint(s) to evaluate.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, env = "MOTSEG_DATA")]
    pub data: PathBuf,
    /// Write the report table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Timed inference runs per checkpoint; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub fps_iters: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "auto")]
    pub flow: FlowChoice,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Variants to time; all when omitted.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 160)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub window: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Disable data parallelism.
    #[arg(long)]
    pub sequential: bool,
    /// Write one row per variant as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long, env = "MOTSEG_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub sequence: String,
    #[arg(long)]
    pub index: usize,
    /// Adds a prediction row per checkpoint.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub flow: FlowChoice,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 4)]
    pub window: usize,
}

/// 1 for bad input, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Format(_) | Error::NotFound(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
