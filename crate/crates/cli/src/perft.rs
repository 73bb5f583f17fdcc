use std::io::Write;
use std::time::Instant;

use anyhow::Result;
use clap::Args;

use xq_core::rules::{Position, START_FEN};

use crate::Exit;

#[derive(Args, Debug)]
pub struct PerftArgs {
    #[arg(long, default_value = START_FEN)]
    pub fen: String,
    #[arg(long, default_value_t = 3)]
    pub depth: u32,
    /// Exit 1 unless the count equals this value.
    #[arg(long)]
    pub expect: Option<u64>,
}

pub fn run(a: &PerftArgs, out: &mut dyn Write) -> Result<i32> {
    let p = Position::from_fen(&a.fen).map_err(|e| Exit::new(2, format!("bad FEN: {e}")))?;
    let t = Instant::now();
    let n = p.perft(a.depth);
    let secs = t.elapsed().as_secs_f64();
    writeln!(out, "perft({}) = {n}", a.depth)?;
    writeln!(out, "time {:.3}s, {:.0} nodes/s", secs, n as f64 / secs.max(1e-9))?;
    match a.expect {
        Some(e) if e != n => {
            writeln!(out, "MISMATCH: expected {e}")?;
            Ok(1)
        }
        _ => Ok(0),
    }
}
