//! The `xq` command line. Exit codes: 0 success, 1 check failed or run error,
//! 2 bad input (unparsable FEN, missing checkpoint, invalid config).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod ablate;
pub mod agents;
pub mod config;
pub mod gradcheck;
pub mod ingest;
pub mod manifest;
pub mod perft;
pub mod train;
pub mod ucci;

pub use config::Config;
pub use manifest::RunManifest;

/// An error carrying the process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    pub fn new(code: i32, message: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(Exit { code, message: message.into() })
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

#[derive(Parser, Debug)]
#[command(name = "xq", version, about = "Xiangqi engine, training pipeline and evaluation tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Count leaf nodes of the legal move tree.
    Perft(perft::PerftArgs),
    /// Parse, clean and index game record files.
    Ingest(ingest::IngestArgs),
    /// Write searcher self-play games as a dataset.
    GenData(ingest::GenDataArgs),
    /// Supervised training from game records.
    TrainSl(train::TrainArgs),
    /// Reinforcement learning against the opponent pool, from a supervised checkpoint.
    TrainRl(train::TrainRlArgs),
    /// Play a match between two agents.
    Arena(agents::ArenaArgs),
    /// Speak the UCCI protocol on standard input and output.
    Ucci(ucci::UcciArgs),
    /// Compare analytic and numeric gradients for every layer kind.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Train one RL arm per advantage estimator and record win-rate curves.
    AblateAdv(ablate::AblateArgs),
}

/// Flags shared by the training commands.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// JSON config; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Runs one command, writing its primary output to `out` and diagnostics to
/// `err`; returns the process exit code.
pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Cmd::Perft(a) => perft::run(&a, out),
        Cmd::Ingest(a) => ingest::run_ingest(&a, out, err),
        Cmd::GenData(a) => ingest::run_gen_data(&a, out),
        Cmd::TrainSl(a) => train::run_sl(&a, out),
        Cmd::TrainRl(a) => train::run_rl(&a, out),
        Cmd::Arena(a) => agents::run_arena(&a, out),
        Cmd::Ucci(a) => ucci::run(&a, input, out),
        Cmd::Gradcheck(a) => gradcheck::run(&a, out),
        Cmd::AblateAdv(a) => ablate::run(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.code);
            let _ = writeln!(err, "error: {e:#}");
            code
        }
    }
}
