//! `semloc` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{
    E2eArgs, EvalArgs, FinetuneArgs, PixelsimArgs, ProjectArgs, RerankArgs, SweepCropArgs, SweepWArgs, SynthArgs,
    TrainArgs,
};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "semloc", about = "Semantic pose verification and re-ranking for visual localization")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct GlobalOptions {
    /// Seed applied to every stochastic stage (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for projection, scoring, training and sweeps.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    /// Log filter, e.g. `info` or `semloc=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with RGB scores and training masks.
    Synth(SynthArgs),
    /// Render gnomonic database views for every panorama of a dataset.
    Project(ProjectArgs),
    /// Print the pixel-wise similarity of two masks.
    Pixelsim(PixelsimArgs),
    /// Train the embedding network on unlabeled masks.
    Train(TrainArgs),
    /// Fine-tune a trained network on labeled query/database pairs.
    Finetune(FinetuneArgs),
    /// Fuse RGB and semantic scores over each query's candidate pool.
    Rerank(RerankArgs),
    /// Recall@N report for one or more result files.
    Eval(EvalArgs),
    /// Recall as a function of the fusion weight.
    SweepW(SweepWArgs),
    /// Recall as a function of the minimum crop ratio used in training.
    SweepCrop(SweepCropArgs),
    /// Synthesize, project, train, re-rank with every method and evaluate.
    E2e(E2eArgs),
}

fn version() -> String {
    format!("{} (format v{})", env!("CARGO_PKG_VERSION"), semloc::FORMAT_VERSION)
}

fn parse() -> Result<Cli, clap::Error> {
    let matches = Cli::command().version(version()).try_get_matches()?;
    Cli::from_arg_matches(&matches)
}

fn init(global: &GlobalOptions) -> anyhow::Result<()> {
    env_logger::Builder::new().parse_filters(&global.log_level).format_timestamp(None).init();
    if let Some(n) = global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    match err.chain().find_map(|e| e.downcast_ref::<semloc::Error>()) {
        Some(e) if e.is_config() => (EXIT_CONFIG, e.kind()),
        Some(e) => (EXIT_RUNTIME, e.kind()),
        None => (EXIT_RUNTIME, "runtime"),
    }
}

/// The error chain joined with `: `, skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain().map(|e| e.to_string()) {
        if !msg.contains(&cause) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&cause);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = init(&cli.global).and_then(|()| commands::run(&cli.global, cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let line = serde_json::json!({ "error": kind, "message": message(&err), "exit_code": code });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
