use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use xq_core::autograd::AdamState;
use xq_core::models::{self, Network};
use xq_core::pool::Pool;
use xq_core::records::{synthesize_games, DatasetIndex, GameRecord};
use xq_core::rl::RlTrainer;
use xq_core::sl::{build_sl_data, SlTrainer};

use crate::manifest::{write_atomic, write_json_atomic, RunManifest};
use crate::{Config, Exit, RunArgs};

pub const MODEL_FILE: &str = "model.xqnp";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const POOL_DIR: &str = "pool";

/// Set by the interrupt handler; training loops stop at the next step boundary.
pub fn interrupted() -> &'static Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        // a second registration (tests) fails harmlessly
        let _ = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst));
        flag
    })
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainRlArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Supervised checkpoint that initialises the learner and seeds the pool.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Serialize, Deserialize)]
struct State {
    progress: u64,
}

/// Loads the config (exit 2 on any schema or value error) and applies the seed override.
pub fn load_config(run: &RunArgs) -> Result<Config> {
    Config::load(run.config.as_deref()).map(|c| c.with_seed(run.seed)).map_err(|e| Exit::new(2, format!("{e:#}")))
}

/// Game records from the configured datasets, or synthesized ones.
pub fn load_records(cfg: &Config) -> Result<Vec<GameRecord>> {
    if cfg.data.datasets.is_empty() {
        return Ok(synthesize_games(&cfg.data.synth, cfg.seed)?);
    }
    let mut out = Vec::new();
    for path in &cfg.data.datasets {
        let idx = DatasetIndex::open(path).or_else(|_| DatasetIndex::build(path)).with_context(|| format!("indexing {}", path.display()))?;
        out.extend(idx.load_all()?);
    }
    Ok(out)
}

fn prepare_dir(dir: &Path, cfg: &Config, resume: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let snapshot = dir.join(CONFIG_FILE);
    if resume {
        let old = Config::load(Some(&snapshot)).context("resuming needs the original config snapshot")?;
        if &old != cfg {
            bail!("config differs from the snapshot in {}", dir.display());
        }
    } else {
        write_json_atomic(&snapshot, cfg)?;
    }
    Ok(())
}

/// Keeps the metric lines logged at or before `progress`.
fn truncate_metrics(path: &Path, progress: u64, key: &str) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v[key].as_u64().is_some_and(|s| s <= progress) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn save_checkpoint(dir: &Path, net: &Network, adam: &AdamState<f32>, progress: u64) -> Result<()> {
    models::save(net, &dir.join(MODEL_FILE))?;
    write_atomic(&dir.join(OPTIMIZER_FILE), &adam.to_bytes())?;
    write_json_atomic(&dir.join(STATE_FILE), &State { progress })
}

fn load_optimizer(dir: &Path) -> Result<AdamState<f32>> {
    let bytes = fs::read(dir.join(OPTIMIZER_FILE))?;
    AdamState::from_bytes(&bytes).map_err(anyhow::Error::msg)
}

fn artifacts(dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).collect()
}

pub fn run_sl(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.run)?;
    let dir = &a.run.out;
    prepare_dir(dir, &cfg, a.resume)?;
    let mut manifest = RunManifest::start(dir, "train-sl", &cfg)?;
    let stop = interrupted();

    let records = load_records(&cfg)?;
    let data = build_sl_data(&records, &cfg.sl, cfg.encoding.feature_variant)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut trainer = if a.resume {
        let net = models::load_expecting(&dir.join(MODEL_FILE), cfg.encoding.feature_variant)?;
        let t = SlTrainer::resume(cfg.sl.clone(), net, load_optimizer(dir)?)?;
        truncate_metrics(&metrics_path, t.step, "step")?;
        t
    } else {
        let t = SlTrainer::new(cfg.sl.clone(), Network::build(cfg.net_config(), cfg.seed)?)?;
        write_atomic(&metrics_path, b"")?;
        save_checkpoint(dir, &t.net, &t.adam, 0)?;
        t
    };
    writeln!(out, "train-sl: {} training positions, {} held-out, {} parameters", data.train.len(), data.eval.len(), trainer.net.num_parameters())?;

    let mut status = "completed";
    while trainer.step < cfg.sl.steps {
        if stop.load(Ordering::SeqCst) {
            status = "interrupted";
            break;
        }
        let loss = trainer.train_step(&data.train);
        if trainer.step % cfg.sl.log_every == 0 || trainer.step == cfg.sl.steps {
            let m = trainer.metrics(loss, &data.train, &data.eval);
            append_line(&metrics_path, &m)?;
            save_checkpoint(dir, &trainer.net, &trainer.adam, trainer.step)?;
            writeln!(out, "step {} loss {:.4} train_acc {:.3}", m.step, m.loss, m.train_acc.unwrap_or(0.0))?;
        }
    }
    save_checkpoint(dir, &trainer.net, &trainer.adam, trainer.step)?;
    manifest.finish(dir, status, artifacts(dir, &[MODEL_FILE, OPTIMIZER_FILE, METRICS_FILE, CONFIG_FILE]))?;
    Ok(if status == "completed" { 0 } else { 130 })
}

pub fn run_rl(a: &TrainRlArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.run)?;
    let dir = &a.run.out;
    let rl_cfg = cfg.rl_config();
    let init_net = if a.resume {
        None
    } else {
        let path = a.init.as_ref().ok_or_else(|| Exit::new(2, "--init is required unless resuming"))?;
        if !path.exists() {
            return Err(Exit::new(2, format!("checkpoint {} not found", path.display())));
        }
        Some(models::load(path).with_context(|| format!("loading {}", path.display()))?)
    };
    prepare_dir(dir, &cfg, a.resume)?;
    let mut manifest = RunManifest::start(dir, "train-rl", &cfg)?;
    let stop = interrupted();
    let metrics_path = dir.join(METRICS_FILE);
    let pool_dir = dir.join(POOL_DIR);

    let mut trainer = match init_net {
        None => {
            let net = models::load(&dir.join(MODEL_FILE))?;
            let state: State = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
            let pool = Pool::load(&pool_dir)?;
            truncate_metrics(&metrics_path, state.progress, "iteration")?;
            RlTrainer::resume(rl_cfg, net, load_optimizer(dir)?, pool, state.progress as usize)?
        }
        Some(net) => {
            let mut t = RlTrainer::new(rl_cfg, net)?;
            write_atomic(&metrics_path, b"")?;
            fs::create_dir_all(&pool_dir)?;
            t.pool.save(&pool_dir)?;
            save_checkpoint(dir, &t.net, &t.adam, 0)?;
            t
        }
    };
    writeln!(out, "train-rl: {} parameters, pool of {}", trainer.net.num_parameters(), trainer.pool.len())?;

    let mut status = "completed";
    while trainer.iteration < cfg.rl.iterations {
        if stop.load(Ordering::SeqCst) {
            status = "interrupted";
            break;
        }
        let m = trainer.iterate();
        append_line(&metrics_path, &m)?;
        trainer.pool.save(&pool_dir)?;
        save_checkpoint(dir, &trainer.net, &trainer.adam, trainer.iteration as u64)?;
        writeln!(
            out,
            "iteration {} w/d/l {}/{}/{} len {:.1} kl {:.4} clip {:.3}{}",
            m.iteration,
            m.wins,
            m.draws,
            m.losses,
            m.mean_episode_length,
            m.approx_kl,
            m.clip_frac,
            if m.gated { " gated" } else { "" }
        )?;
    }
    manifest.finish(dir, status, artifacts(dir, &[MODEL_FILE, OPTIMIZER_FILE, METRICS_FILE, CONFIG_FILE, POOL_DIR]))?;
    Ok(if status == "completed" { 0 } else { 130 })
}
