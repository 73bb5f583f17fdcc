//! Advantage-estimator ablation: one RL arm per estimator from the same
//! supervised start, each evaluated against that start at fixed intervals.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use xq_core::arena::{play_match, MatchConfig, NetworkAgent};
use xq_core::models;
use xq_core::rl::{AdvConfig, AdvMode, RlTrainer};

use crate::manifest::{write_atomic, RunManifest};
use crate::train::{load_config, CONFIG_FILE};
use crate::{Exit, RunArgs};

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Supervised checkpoint shared by every arm.
    #[arg(long)]
    pub init: PathBuf,
    /// Comma-separated arms: gae, gae-unit (γ = λ = 1), vect:<L>, vect:inf
    #[arg(long, default_value = "gae,gae-unit,vect:5,vect:10,vect:20,vect:50,vect:inf")]
    pub arms: String,
}

/// Parses one arm name against the configured γ and λ.
pub fn parse_arm(name: &str, base: &AdvConfig) -> Result<AdvConfig> {
    let bad = || Exit::new(2, format!("unknown arm {name:?}"));
    Ok(match name {
        "gae" => AdvConfig { mode: AdvMode::Gae, ..*base },
        "gae-unit" => AdvConfig { gamma: 1.0, lambda: 1.0, mode: AdvMode::Gae },
        "vect:inf" => AdvConfig { mode: AdvMode::Vect { cutoff: usize::MAX }, ..*base },
        _ => {
            let l = name.strip_prefix("vect:").ok_or_else(bad)?;
            AdvConfig { mode: AdvMode::Vect { cutoff: l.parse().map_err(|_| bad())? }, ..*base }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub iteration: usize,
    pub score: f64,
    pub score_ci: (f64, f64),
    pub win_rate: f64,
    pub draw_rate: f64,
}

pub fn run(a: &AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.run)?;
    if !a.init.is_file() {
        return Err(Exit::new(2, format!("checkpoint {} not found", a.init.display())));
    }
    let arms: Vec<(String, AdvConfig)> = a
        .arms
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_arm(s, &cfg.rl.adv).map(|c| (s.to_string(), c)))
        .collect::<Result<_>>()?;
    let sl = models::load(&a.init).with_context(|| format!("loading {}", a.init.display()))?;
    let dir = &a.run.out;
    fs::create_dir_all(dir)?;
    crate::manifest::write_json_atomic(&dir.join(CONFIG_FILE), &cfg)?;
    let mut manifest = RunManifest::start(dir, "ablate-adv", &cfg)?;

    let eval = MatchConfig { games: cfg.rl.eval_games, ply_cap: cfg.rl.ppo.max_plies, seed: cfg.seed, ..MatchConfig::default() };
    let reference = NetworkAgent::new(sl.clone(), 1.0, "sl");
    let mut lines = String::new();
    for (name, adv) in arms {
        let mut rl_cfg = cfg.rl_config();
        rl_cfg.adv = adv;
        let mut trainer = RlTrainer::new(rl_cfg, sl.clone())?;
        while trainer.iteration < cfg.rl.iterations {
            trainer.iterate();
            if trainer.iteration % cfg.rl.eval_every == 0 || trainer.iteration == cfg.rl.iterations {
                let learner = NetworkAgent::new(trainer.net.clone(), 1.0, name.clone());
                let r = play_match(&learner, &reference, &eval)?;
                let p = CurvePoint {
                    arm: name.clone(),
                    iteration: trainer.iteration,
                    score: r.score,
                    score_ci: r.score_ci,
                    win_rate: r.win_rate,
                    draw_rate: r.draw_rate,
                };
                writeln!(out, "{} iteration {} vs start: {} score {:.3}", p.arm, p.iteration, r.table_cell(), p.score)?;
                lines.push_str(&serde_json::to_string(&p)?);
                lines.push('\n');
                write_atomic(&dir.join("curves.jsonl"), lines.as_bytes())?;
            }
        }
    }
    manifest.finish(dir, "completed", vec![dir.join("curves.jsonl")])?;
    Ok(0)
}
