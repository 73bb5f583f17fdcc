//! Run configuration: one JSON document, every field defaulted, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use xq_core::arena::MatchConfig;
use xq_core::encoding::FeatureVariant;
use xq_core::models::{Architecture, NetConfig, PolicyHead};
use xq_core::pool::PoolConfig;
use xq_core::records::SynthConfig;
use xq_core::rl::{AdvConfig, OpeningBook, PpoConfig, RlConfig};
use xq_core::search::SearchConfig;
use xq_core::sl::SlConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Record files written by `ingest` or `gen-data`; when empty, games are synthesized.
    pub datasets: Vec<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { datasets: Vec::new(), synth: SynthConfig { games: 200, ..SynthConfig::default() } }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingSection {
    pub feature_variant: FeatureVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Architecture,
    pub policy_head: PolicyHead,
    pub head_dim: usize,
    pub value_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Architecture::ModResNetMicro { blocks: 2, channels: 32 },
            policy_head: PolicyHead::Flat8100,
            head_dim: 32,
            value_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub iterations: usize,
    pub ppo: PpoConfig,
    pub adv: AdvConfig,
    pub openings: Vec<Vec<String>>,
    /// Iterations between evaluation points in `ablate-adv`.
    pub eval_every: usize,
    /// Games per evaluation point in `ablate-adv`.
    pub eval_games: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let d = RlConfig::default();
        RlSection { iterations: d.iterations, ppo: d.ppo, adv: d.adv, openings: d.openings, eval_every: 10, eval_games: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub encoding: EncodingSection,
    pub model: ModelSection,
    pub sl: SlConfig,
    pub rl: RlSection,
    pub pool: PoolConfig,
    pub arena: MatchConfig,
    pub search: SearchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataSection::default(),
            encoding: EncodingSection::default(),
            model: ModelSection::default(),
            sl: SlConfig::default(),
            rl: RlSection::default(),
            pool: PoolConfig::default(),
            arena: MatchConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Config::from_json(&text).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(Config::default()),
        }
    }

    /// The run seed drives every section's generator.
    pub fn with_seed(mut self, seed: Option<u64>) -> Config {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.sl.seed = self.seed;
        self.arena.seed = self.seed;
        self
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            arch: self.model.arch.clone(),
            feature_variant: self.encoding.feature_variant,
            policy_head: self.model.policy_head,
            head_dim: self.model.head_dim,
            value_hidden: self.model.value_hidden,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            iterations: self.rl.iterations,
            ppo: self.rl.ppo.clone(),
            adv: self.rl.adv,
            pool: self.pool.clone(),
            openings: self.rl.openings.clone(),
            seed: self.seed,
        }
    }

    /// Every section is checked before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        self.sl.validate()?;
        self.rl_config().validate()?;
        OpeningBook::parse(&self.rl.openings)?;
        self.arena.validate()?;
        if self.search.depth == 0 {
            bail!("search.depth must be at least 1");
        }
        if self.rl.eval_every == 0 || self.rl.eval_games == 0 || self.rl.eval_games % 2 != 0 {
            bail!("rl.eval_every must be positive and rl.eval_games a positive even number");
        }
        if self.data.synth.games == 0 && self.data.datasets.is_empty() {
            bail!("data: no datasets and zero synthesized games");
        }
        Ok(())
    }
}
