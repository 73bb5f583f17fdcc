use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use xq_core::records::{clean, parse_records, synthesize_games, write_dataset, CleanStats, SynthConfig};
use xq_core::rules::Outcome;
use xq_core::search::SearchConfig;

use crate::Exit;

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Record files, each holding one or more games.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Cleaned dataset; an index sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct IngestReport {
    #[serde(flatten)]
    stats: CleanStats,
    parse_errors: usize,
    failed_files: usize,
}

pub fn run_ingest(a: &IngestArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut games = Vec::new();
    let mut parse_errors = 0;
    let mut failed_files = 0;
    for path in &a.paths {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                writeln!(err, "{}: {e}", path.display())?;
                failed_files += 1;
                continue;
            }
        };
        let mut ok = 0;
        for (i, r) in parse_records(&text).into_iter().enumerate() {
            match r {
                Ok(g) => {
                    games.push(g);
                    ok += 1;
                }
                Err(e) => {
                    writeln!(err, "{} record {i}: {e}", path.display())?;
                    parse_errors += 1;
                }
            }
        }
        if ok == 0 {
            writeln!(err, "{}: no parsable records", path.display())?;
            failed_files += 1;
        }
    }
    if failed_files == a.paths.len() {
        return Err(Exit::new(1, "every input file failed"));
    }
    let (kept, stats) = clean(games);
    write_dataset(&a.out, &kept).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(out, "{}", serde_json::to_string(&IngestReport { stats, parse_errors, failed_files })?)?;
    Ok(0)
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    pub games: usize,
    /// Alpha-beta depth of the labelling searcher.
    #[arg(long, default_value_t = 1)]
    pub depth: u32,
    /// Probability of a random move after the opening.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 6)]
    pub opening_plies: usize,
    #[arg(long, default_value_t = 120)]
    pub ply_cap: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct GenReport {
    games: usize,
    decisive: usize,
    mean_plies: f64,
}

pub fn run_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = SynthConfig {
        games: a.games,
        search: SearchConfig::depth(a.depth),
        random_opening_plies: a.opening_plies,
        epsilon: a.epsilon,
        draw_move_cap: a.ply_cap,
    };
    if a.depth == 0 || !(0.0..=1.0).contains(&a.epsilon) {
        return Err(Exit::new(2, "depth must be positive and epsilon in [0, 1]"));
    }
    let games = synthesize_games(&cfg, a.seed)?;
    write_dataset(&a.out, &games).with_context(|| format!("writing {}", a.out.display()))?;
    let report = GenReport {
        games: games.len(),
        decisive: games.iter().filter(|g| g.result != Outcome::Draw).count(),
        mean_plies: games.iter().map(|g| g.plies() as f64).sum::<f64>() / games.len().max(1) as f64,
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(0)
}
