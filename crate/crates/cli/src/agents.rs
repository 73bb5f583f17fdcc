use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use xq_core::arena::{play_match, Agent, MatchConfig, NetworkAgent, RandomAgent, SearchAgent};
use xq_core::models;
use xq_core::search::SearchConfig;

use crate::manifest::write_json_atomic;
use crate::{Config, Exit};

/// Parses `random`, `alphabeta:<depth>` or `checkpoint:<path>` (a bare path
/// also names a checkpoint). A missing checkpoint is exit code 2.
pub fn parse_agent(spec: &str, tau: f64, search: &SearchConfig) -> Result<Box<dyn Agent>> {
    if spec == "random" {
        return Ok(Box::new(RandomAgent));
    }
    if let Some(d) = spec.strip_prefix("alphabeta:") {
        let depth: u32 = d.parse().map_err(|_| Exit::new(2, format!("bad depth in {spec:?}")))?;
        if depth == 0 {
            return Err(Exit::new(2, "alpha-beta depth must be at least 1"));
        }
        return Ok(Box::new(SearchAgent { config: SearchConfig { depth, ..search.clone() } }));
    }
    let path = PathBuf::from(spec.strip_prefix("checkpoint:").unwrap_or(spec));
    if !path.is_file() {
        return Err(Exit::new(2, format!("checkpoint {} not found", path.display())));
    }
    let net = models::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Box::new(NetworkAgent::new(net, tau, format!("{}@tau={tau}", path.display()))))
}

#[derive(Args, Debug)]
pub struct ArenaArgs {
    /// First agent: random | alphabeta:<depth> | checkpoint:<path>
    #[arg(long)]
    pub a: String,
    /// Second agent, same syntax.
    #[arg(long)]
    pub b: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub games: Option<usize>,
    /// Sampling temperature of a network agent A; 0 plays the argmax.
    #[arg(long)]
    pub tau_a: Option<f64>,
    #[arg(long)]
    pub tau_b: Option<f64>,
    #[arg(long)]
    pub ply_cap: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn match_config(a: &ArenaArgs, cfg: &Config) -> MatchConfig {
    let mut m = cfg.arena.clone();
    if let Some(g) = a.games {
        m.games = g;
    }
    if let Some(t) = a.tau_a {
        m.tau_a = t;
    }
    if let Some(t) = a.tau_b {
        m.tau_b = t;
    }
    if let Some(c) = a.ply_cap {
        m.ply_cap = c;
    }
    if let Some(s) = a.seed {
        m.seed = s;
    }
    m
}

pub fn run_arena(a: &ArenaArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = Config::load(a.config.as_deref()).map_err(|e| Exit::new(2, format!("{e:#}")))?;
    let mc = match_config(a, &cfg);
    mc.validate().map_err(|e| Exit::new(2, e.to_string()))?;
    let agent_a = parse_agent(&a.a, mc.tau_a, &cfg.search)?;
    let agent_b = parse_agent(&a.b, mc.tau_b, &cfg.search)?;
    let report = play_match(agent_a.as_ref(), agent_b.as_ref(), &mc)?;
    writeln!(out, "{} vs {}: {}", report.agent_a, report.agent_b, report.table_cell())?;
    writeln!(
        out,
        "games {} w/d/l {}/{}/{} score {:.3} [{:.3}, {:.3}] mean length {:.1}",
        report.games, report.wins, report.draws, report.losses, report.score, report.score_ci.0, report.score_ci.1, report.mean_length
    )?;
    if let Some(path) = &a.out {
        write_json_atomic(path, &report)?;
    }
    Ok(0)
}
