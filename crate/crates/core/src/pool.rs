//! Dynamic opponent pool: snapshots of the learner, each with an EMA of the
//! learner's score against it. Stronger opponents (lower score) are picked
//! more often, and the learner joins the pool once it beats every entry.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{self, probe_hash, ModelError, Network};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no pool entry with id {0}")]
    UnknownEntry(u64),
    #[error("invalid pool config: {0}")]
    Config(String),
    #[error("pool manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Selection temperature; below 1e-9 selection is greedy.
    pub tau_sel: f64,
    pub gate_threshold: f64,
    /// Opponent sampling temperature (sharper than the learner's).
    pub tau_opp: f64,
    pub tau_train: f64,
    pub ema_alpha: f64,
    pub max_size: usize,
    pub min_games: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { tau_sel: 0.1, gate_threshold: 0.55, tau_opp: 0.5, tau_train: 1.0, ema_alpha: 0.05, max_size: 8, min_games: 50 }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        let bad = |m: &str| Err(PoolError::Config(m.into()));
        if !(self.tau_sel >= 0.0 && self.tau_sel.is_finite()) {
            return bad("tau_sel must be non-negative");
        }
        if !(0.5..1.0).contains(&self.gate_threshold) {
            return bad("gate_threshold must be in [0.5, 1)");
        }
        if !(self.tau_opp >= 0.0 && self.tau_train >= 0.0) {
            return bad("temperatures must be non-negative");
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad("ema_alpha must be in (0, 1]");
        }
        if self.max_size < 2 {
            return bad("max_size must be at least 2");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GameScore {
    Win,
    Draw,
    Loss,
}

impl GameScore {
    pub fn value(self) -> f64 {
        match self {
            GameScore::Win => 1.0,
            GameScore::Draw => 0.5,
            GameScore::Loss => 0.0,
        }
    }

    /// From a learner's ±1/0 result.
    pub fn from_result(z: f64) -> GameScore {
        if z > 0.0 {
            GameScore::Win
        } else if z < 0.0 {
            GameScore::Loss
        } else {
            GameScore::Draw
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: u64,
    pub checkpoint: Option<PathBuf>,
    pub probe_hash: u64,
    /// EMA of the learner's score against this entry.
    pub r: f64,
    pub games: u64,
    pub games_since_gate: u64,
    #[serde(skip)]
    pub net: Option<Network>,
}

impl PoolEntry {
    pub fn network(&self) -> &Network {
        self.net.as_ref().expect("pool entry snapshot is loaded")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub config: PoolConfig,
    entries: Vec<PoolEntry>,
    next_id: u64,
}

impl Pool {
    /// A pool holding only the supervised snapshot, with the 0.5 prior.
    pub fn init(seed: Network, config: PoolConfig) -> Result<Pool, PoolError> {
        config.validate()?;
        let mut pool = Pool { config, entries: Vec::new(), next_id: 0 };
        pool.push(seed);
        Ok(pool)
    }

    fn push(&mut self, net: Network) {
        self.entries.push(PoolEntry {
            id: self.next_id,
            checkpoint: None,
            probe_hash: probe_hash(&net),
            r: 0.5,
            games: 0,
            games_since_gate: 0,
            net: Some(net),
        });
        self.next_id += 1;
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u64) -> Result<&PoolEntry, PoolError> {
        self.entries.iter().find(|e| e.id == id).ok_or(PoolError::UnknownEntry(id))
    }

    /// Selection probabilities `∝ exp(−r_i / τ_sel)`, in entry order.
    pub fn probabilities(&self) -> Vec<f64> {
        let tau = self.config.tau_sel;
        let rmin = self.entries.iter().map(|e| e.r).fold(f64::INFINITY, f64::min);
        if tau < 1e-9 {
            let first = self.entries.iter().position(|e| e.r == rmin).unwrap();
            return (0..self.entries.len()).map(|i| if i == first { 1.0 } else { 0.0 }).collect();
        }
        let w: Vec<f64> = self.entries.iter().map(|e| (-(e.r - rmin) / tau).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// Id of the sampled opponent.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let p = self.probabilities();
        let mut u = rng.gen::<f64>();
        for (e, &pi) in self.entries.iter().zip(&p) {
            if u < pi {
                return e.id;
            }
            u -= pi;
        }
        self.entries[p.iter().rposition(|&x| x > 0.0).unwrap()].id
    }

    pub fn record_result(&mut self, id: u64, score: GameScore) -> Result<(), PoolError> {
        let a = self.config.ema_alpha;
        let e = self.entries.iter_mut().find(|e| e.id == id).ok_or(PoolError::UnknownEntry(id))?;
        e.r = ((1.0 - a) * e.r + a * score.value()).clamp(0.0, 1.0);
        e.games += 1;
        e.games_since_gate += 1;
        Ok(())
    }

    /// Adds `current` once every entry has `min_games` fresh results and the
    /// learner's lowest score reaches the threshold. The seed entry is never evicted.
    pub fn maybe_gate(&mut self, current: &Network) -> bool {
        if self.entries.iter().any(|e| e.games_since_gate < self.config.min_games) {
            return false;
        }
        let rmin = self.entries.iter().map(|e| e.r).fold(f64::INFINITY, f64::min);
        if rmin < self.config.gate_threshold {
            return false;
        }
        for e in &mut self.entries {
            e.games_since_gate = 0;
        }
        self.push(current.clone());
        if self.entries.len() > self.config.max_size {
            let seed_id = self.entries[0].id;
            if let Some(i) = self.entries.iter().position(|e| e.id != seed_id) {
                self.entries.remove(i);
            }
        }
        true
    }

    /// Writes every snapshot as `<dir>/entry_<id>.xqnp` and the manifest as `<dir>/pool.json`.
    pub fn save(&mut self, dir: &Path) -> Result<(), PoolError> {
        fs::create_dir_all(dir)?;
        for e in &mut self.entries {
            let path = dir.join(format!("entry_{}.xqnp", e.id));
            if !path.exists() {
                models::save(e.network(), &path)?;
            }
            e.checkpoint = Some(path);
        }
        let tmp = dir.join("pool.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self).map_err(|e| PoolError::Manifest(e.to_string()))?)?;
        fs::rename(tmp, dir.join("pool.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Pool, PoolError> {
        let text = fs::read(dir.join("pool.json"))?;
        let mut pool: Pool = serde_json::from_slice(&text).map_err(|e| PoolError::Manifest(e.to_string()))?;
        pool.config.validate()?;
        for e in &mut pool.entries {
            let path = e.checkpoint.clone().ok_or_else(|| PoolError::Manifest(format!("entry {} has no checkpoint", e.id)))?;
            let net = models::load(&path)?;
            if probe_hash(&net) != e.probe_hash {
                return Err(PoolError::Manifest(format!("entry {} checkpoint does not match its probe hash", e.id)));
            }
            e.net = Some(net);
        }
        if pool.entries.is_empty() {
            return Err(PoolError::Manifest("empty pool".into()));
        }
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Network {
        Network::build(NetConfig::mod_resnet(1, 4).with_head_dim(4).with_value_hidden(4), seed).unwrap()
    }

    fn pool_with(rs: &[f64], cfg: PoolConfig) -> Pool {
        let mut p = Pool::init(net(0), cfg).unwrap();
        for i in 1..rs.len() {
            p.push(net(i as u64));
        }
        for (e, &r) in p.entries.iter_mut().zip(rs) {
            e.r = r;
        }
        p
    }

    fn frequencies(p: &Pool, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; p.len()];
        for _ in 0..n {
            let id = p.select(&mut rng);
            counts[p.entries.iter().position(|e| e.id == id).unwrap()] += 1;
        }
        counts.into_iter().map(|c| c as f64 / n as f64).collect()
    }

    #[test]
    fn fresh_pool_has_the_seed_at_one_half() {
        let seed = net(3);
        let p = Pool::init(seed.clone(), PoolConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.entries()[0].r, 0.5);
        assert_eq!(p.entries()[0].probe_hash, probe_hash(&seed));
    }

    #[test]
    fn equal_scores_select_uniformly() {
        let p = pool_with(&[0.4, 0.4, 0.4, 0.4], PoolConfig::default());
        for f in frequencies(&p, 100_000, 1) {
            assert!((f - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn softmax_selection_for_zero_and_one() {
        let p = pool_with(&[0.0, 1.0], PoolConfig { tau_sel: 1.0, ..PoolConfig::default() });
        let probs = p.probabilities();
        assert!((probs[0] - 0.7310585786300049).abs() < 1e-12);
        let f = frequencies(&p, 100_000, 2);
        assert!((f[0] - 0.7311).abs() < 0.01 && (f[1] - 0.2689).abs() < 0.01);
    }

    #[test]
    fn zero_temperature_picks_the_lowest_score() {
        let p = pool_with(&[0.7, 0.3, 0.3, 0.9], PoolConfig { tau_sel: 0.0, ..PoolConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(p.select(&mut rng), 1);
        }
    }

    #[test]
    fn ema_updates() {
        let mut p = pool_with(&[0.5], PoolConfig::default());
        p.record_result(0, GameScore::Win).unwrap();
        assert!((p.entries()[0].r - 0.525).abs() < 1e-12);
        let mut p = pool_with(&[0.5], PoolConfig::default());
        for _ in 0..100 {
            p.record_result(0, GameScore::Draw).unwrap();
        }
        assert_eq!(p.entries()[0].r, 0.5);
        let mut prev = p.entries()[0].r;
        for _ in 0..500 {
            p.record_result(0, GameScore::Win).unwrap();
            let r = p.entries()[0].r;
            assert!(r >= prev && r <= 1.0);
            prev = r;
        }
        assert!(prev > 0.999);
        assert!(matches!(p.record_result(42, GameScore::Loss), Err(PoolError::UnknownEntry(42))));
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut p = pool_with(&[0.5, 0.5], PoolConfig { ema_alpha: 1.0, ..PoolConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let s = [GameScore::Win, GameScore::Draw, GameScore::Loss][rng.gen_range(0..3)];
            p.record_result(rng.gen_range(0..2), s).unwrap();
            assert!(p.entries().iter().all(|e| (0.0..=1.0).contains(&e.r)));
        }
    }

    fn ready(p: &mut Pool) {
        for e in &mut p.entries {
            e.games_since_gate = p.config.min_games;
        }
    }

    #[test]
    fn gate_fires_iff_every_score_clears_the_threshold() {
        let mut p = pool_with(&[0.6, 0.7], PoolConfig::default());
        ready(&mut p);
        assert!(p.maybe_gate(&net(9)));
        assert_eq!(p.len(), 3);
        assert_eq!(p.entries()[2].r, 0.5);

        let mut p = pool_with(&[0.6, 0.5], PoolConfig::default());
        ready(&mut p);
        assert!(!p.maybe_gate(&net(9)));
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn gate_waits_for_min_games() {
        let mut p = pool_with(&[0.9, 0.9], PoolConfig::default());
        p.entries[0].games_since_gate = 50;
        p.entries[1].games_since_gate = 49;
        assert!(!p.maybe_gate(&net(9)));
        p.entries[1].games_since_gate = 50;
        assert!(p.maybe_gate(&net(9)));
        assert!(!p.maybe_gate(&net(10)), "counters reset after a gate");
    }

    #[test]
    fn eviction_keeps_the_seed() {
        let cfg = PoolConfig { max_size: 3, ..PoolConfig::default() };
        let mut p = pool_with(&[0.9, 0.9, 0.9], cfg);
        for round in 0..5 {
            for e in &mut p.entries {
                e.r = 0.9;
            }
            ready(&mut p);
            assert!(p.maybe_gate(&net(100 + round)));
            assert_eq!(p.len(), 3);
            assert_eq!(p.entries()[0].id, 0);
        }
        let ids: Vec<u64> = p.entries().iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![0, 6, 7]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pool_with(&[0.3, 0.8], PoolConfig::default());
        p.record_result(1, GameScore::Loss).unwrap();
        p.save(dir.path()).unwrap();
        let back = Pool::load(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.entries()[1].network(), p.entries()[1].network());
    }

    #[test]
    fn config_bounds() {
        assert!(PoolConfig { gate_threshold: 0.4, ..PoolConfig::default() }.validate().is_err());
        assert!(PoolConfig { gate_threshold: 1.0, ..PoolConfig::default() }.validate().is_err());
        assert!(PoolConfig { max_size: 1, ..PoolConfig::default() }.validate().is_err());
        assert!(PoolConfig::default().validate().is_ok());
    }
}
