mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "xstream", version, about = "Two-stream self-supervised training with shared prototype assignments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the factorized two-stream benchmark.
    GenData(GenDataArgs),
    /// Train stage 1, the cross-stream cycles, or both.
    Train(TrainArgs),
    /// Evaluate a checkpoint: retrieval, linear probe, cluster metrics.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Write encoder features and labels as a dataset file.
    ExportEmbeddings(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    /// Factor sizes as `M1xM2`.
    #[arg(long)]
    factor_split: Option<String>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Stage1,
    Cross,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Prototype,
    Infonce,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    stage: Stage,
    #[arg(long, value_enum, default_value = "prototype")]
    mode: TrainMode,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `prediction-views=all|other-stream`, `assignment-views=both|other-stream`
    /// or `targets=sinkhorn|softmax`; repeatable.
    #[arg(long)]
    ablation: Vec<String>,
    /// Stage-1 checkpoint to start the cross-stream stage from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Line-delimited JSON metric log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    fresh_prototypes: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    queue_len: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    Retrieval,
    Probe,
    Cluster,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Streams {
    Rgb,
    Flow,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Features {
    PreHead,
    Head,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    report: Report,
    #[arg(long, value_enum, default_value = "both")]
    streams: Streams,
    #[arg(long)]
    k_eval: Option<usize>,
    #[arg(long, value_enum)]
    features: Option<Features>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckModeArg {
    Infonce,
    SingleStream,
    CrossStream,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Loss modes to check; all when omitted.
    #[arg(long, value_enum)]
    mode: Vec<CheckModeArg>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Negates one analytic gradient to confirm the check can fail.
    #[arg(long, hide = true)]
    sign_flip: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    features: Option<Features>,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
