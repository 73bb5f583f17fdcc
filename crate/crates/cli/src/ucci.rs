//! UCCI subset: `ucci`, `isready`, `position`, `go`, `quit`.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xq_core::models::{self, Network};
use xq_core::rules::{Move, Position};
use xq_core::search::{search, SearchConfig};

use crate::Exit;

#[derive(Args, Debug)]
pub struct UcciArgs {
    /// Network used for `go`; without it the alpha-beta searcher plays.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sampling temperature; 0 plays the argmax.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Default search depth for `go` without a network.
    #[arg(long, default_value_t = 3)]
    pub depth: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub struct Engine {
    pub net: Option<Network>,
    pub tau: f64,
    pub depth: u32,
    pub position: Position,
    rng: ChaCha8Rng,
}

impl Engine {
    pub fn new(net: Option<Network>, tau: f64, depth: u32, seed: u64) -> Engine {
        Engine { net, tau, depth, position: Position::startpos(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Handles one line; returns false on `quit`.
    pub fn handle(&mut self, line: &str, out: &mut dyn Write) -> Result<bool> {
        let mut words = line.split_whitespace();
        let Some(cmd) = words.next() else { return Ok(true) };
        let rest: Vec<&str> = words.collect();
        match cmd {
            "ucci" => {
                writeln!(out, "id name xq")?;
                writeln!(out, "ucciok")?;
            }
            "isready" => writeln!(out, "readyok")?,
            "position" => self.set_position(&rest, out)?,
            "go" => self.go(&rest, out)?,
            "quit" => return Ok(false),
            _ => writeln!(out, "info string unknown command {cmd}")?,
        }
        Ok(true)
    }

    fn set_position(&mut self, args: &[&str], out: &mut dyn Write) -> Result<()> {
        let moves_at = args.iter().position(|&w| w == "moves").unwrap_or(args.len());
        let base = match args.first() {
            Some(&"startpos") => Ok(Position::startpos()),
            Some(&"fen") => Position::from_fen(&args[1..moves_at].join(" ")),
            _ => {
                writeln!(out, "info string expected startpos or fen")?;
                return Ok(());
            }
        };
        let mut p = match base {
            Ok(p) => p,
            Err(e) => {
                writeln!(out, "info string bad fen: {e}")?;
                return Ok(());
            }
        };
        for (k, s) in args.iter().skip(moves_at + 1).enumerate() {
            match s.parse::<Move>().ok().and_then(|m| p.apply_move(m).ok()) {
                Some(next) => p = next,
                None => {
                    writeln!(out, "info string illegal move at {k}")?;
                    break;
                }
            }
        }
        self.position = p;
        Ok(())
    }

    fn go(&mut self, args: &[&str], out: &mut dyn Write) -> Result<()> {
        let depth = match args {
            ["depth", d, ..] => d.parse().unwrap_or(self.depth).max(1),
            _ => self.depth,
        };
        if self.position.terminal().is_some() {
            writeln!(out, "nobestmove")?;
            return Ok(());
        }
        let m = match &self.net {
            Some(net) => models::sample_move(net, &self.position, self.tau, &mut self.rng)?,
            None => search(&self.position, &SearchConfig::depth(depth))?.best,
        };
        writeln!(out, "bestmove {m}")?;
        Ok(())
    }
}

pub fn run(a: &UcciArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<i32> {
    let net = match &a.checkpoint {
        Some(p) if !p.is_file() => return Err(Exit::new(2, format!("checkpoint {} not found", p.display()))),
        Some(p) => Some(models::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut engine = Engine::new(net, a.tau, a.depth, a.seed);
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let keep = engine.handle(line.trim(), out)?;
        out.flush()?;
        if !keep {
            break;
        }
    }
    Ok(0)
}
