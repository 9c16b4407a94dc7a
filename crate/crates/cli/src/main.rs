mod eval;
mod manifest;
mod pipeline;
mod synth;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Egocentric target-conversation extraction: data synthesis,
/// spatialization, streaming inference, evaluation and benchmarking.
#[derive(Debug, Parser)]
#[command(name = "egoconv", version, propagate_version = true)]
struct Cli {
    /// Root seed; every random stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate conversation mixtures with ground-truth stems.
    Synth(synth::SynthArgs),
    /// Render mixtures binaurally in random rooms.
    Spatialize(synth::SpatializeArgs),
    /// Stream a mixture through the fast/slow pipeline.
    Run(pipeline::RunArgs),
    /// Score a processed output against its package.
    Eval(eval::EvalArgs),
    /// Turn-taking statistics of scripts or timestamp files.
    Stats(eval::StatsArgs),
    /// Time each model and report real-time factors.
    Bench(pipeline::BenchArgs),
    /// Write seeded random weights for all three models.
    InitWeights(pipeline::InitArgs),
}

/// Options shared by commands that load models.
#[derive(Debug, Args, Clone, serde::Serialize)]
pub struct ModelArgs {
    /// Directory with fast.egsw, slow.egsw and beamformer.egsw; random
    /// weights from --seed when omitted.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    /// Slow-model period T in seconds (a multiple of the 12.5 ms chunk).
    #[arg(long = "T", default_value_t = 1.0)]
    pub period: f64,
    /// Skip the self-speech beamformer (mono input then needs --selfspeech).
    #[arg(long)]
    pub no_beamformer: bool,
}

/// Bad invocation: exits with 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let ctx = manifest::Context::new(cli.seed, &argv);
    let result = match cli.command {
        Command::Synth(a) => synth::synth(a, ctx),
        Command::Spatialize(a) => synth::spatialize(a, ctx),
        Command::Run(a) => pipeline::run(a, ctx),
        Command::Eval(a) => eval::eval(a, ctx),
        Command::Stats(a) => eval::stats(a, ctx),
        Command::Bench(a) => pipeline::bench(a, ctx),
        Command::InitWeights(a) => pipeline::init_weights(a, ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
