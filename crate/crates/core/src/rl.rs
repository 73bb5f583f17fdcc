//! Reinforcement learning against an opponent pool: batched rollouts with
//! forced openings, GAE and truncated (VECT) advantages, clipped PPO updates.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AdamConfig, AdamState, Graph, ParamSet, Real, Tensor};
use crate::encoding::{canonical_mask, encode, from_canonical_index, LegalityMask, Observation, NUM_ACTIONS};
use crate::models::{sample_index, tempered_distribution, ModelError, Network};
use crate::pool::{GameScore, Pool, PoolConfig, PoolError};
use crate::rules::{DrawRules, Move, Outcome, Position, Side};


#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("opening {line}: {reason}")]
    Opening { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdvMode {
    Gae,
    /// Truncated at `cutoff` plies of the player's own trajectory.
    Vect { cutoff: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub mode: AdvMode,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig { gamma: 1.0, lambda: 0.95, mode: AdvMode::Vect { cutoff: 20 } }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RlError::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RlError::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn advantages(&self, rewards: &[f64], values: &[f64], bootstrap: f64) -> Vec<f64> {
        match self.mode {
            AdvMode::Gae => gae(rewards, values, bootstrap, self.gamma, self.lambda),
            AdvMode::Vect { cutoff } => vect(rewards, values, bootstrap, self.gamma, self.lambda, cutoff),
        }
    }
}

/// `δ_t = r_t + γ V(s_{t+1}) − V(s_t)` with `V(s_T) = bootstrap`.
pub fn td_residuals(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    (0..rewards.len())
        .map(|t| {
            let next = values.get(t + 1).copied().unwrap_or(bootstrap);
            rewards[t] + gamma * next - values[t]
        })
        .collect()
}

/// `Â_t = Σ_{n≥0} (γλ)^n δ_{t+n}` to the end of the episode.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let delta = td_residuals(rewards, values, bootstrap, gamma);
    let mut out = vec![0.0; delta.len()];
    let mut acc = 0.0;
    for t in (0..delta.len()).rev() {
        acc = delta[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

/// `Â_t = Σ_{n=0}^{min(L, T−1−t)} (γλ)^n δ_{t+n}`.
pub fn vect(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64, cutoff: usize) -> Vec<f64> {
    let delta = td_residuals(rewards, values, bootstrap, gamma);
    let len = delta.len();
    if cutoff >= len {
        return gae(rewards, values, bootstrap, gamma, lambda);
    }
    let decay = gamma * lambda;
    (0..len)
        .map(|t| {
            let end = (t + cutoff).min(len - 1);
            let mut acc = 0.0;
            for k in (t..=end).rev() {
                acc = delta[k] + decay * acc;
            }
            acc
        })
        .collect()
}

/// Mean 0, standard deviation 1 (population), with the deviation floored at 1e-8.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// One decision of the learner, in its own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub mask: LegalityMask,
    /// Canonical action index.
    pub action: usize,
    /// Log-probability under the behaviour policy at the training temperature.
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// `V(s_T)`: 0 after a real terminal.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }

    pub fn advantages(&self, cfg: &AdvConfig) -> Vec<f64> {
        cfg.advantages(&self.rewards(), &self.values(), self.bootstrap)
    }

    /// Exactly one terminal step, last; rewards only there, in {-1, 0, 1}.
    pub fn validate(&self) -> Result<(), String> {
        let last = self.steps.len().checked_sub(1).ok_or("empty trajectory")?;
        for (i, s) in self.steps.iter().enumerate() {
            if s.done != (i == last) {
                return Err(format!("step {i}: done flag {}", s.done));
            }
            let ok = if i == last { [-1.0, 0.0, 1.0].contains(&s.reward) } else { s.reward == 0.0 };
            if !ok {
                return Err(format!("step {i}: reward {}", s.reward));
            }
        }
        Ok(())
    }
}

/// Curated opening lines forced at the start of rollouts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpeningBook {
    pub lines: Vec<Vec<Move>>,
}

const CURATED: &[&[&str]] = &[
    &["h2e2", "h9g7"],
    &["h2e2", "b9c7"],
    &["h2e2", "h7e7"],
    &["b2e2", "b9c7"],
    &["c3c4", "g6g5"],
    &["g3g4", "c6c5"],
    &["b0c2", "h9g7"],
    &["h0g2", "b9c7"],
    &["c0e2", "h7e7"],
    &["g0e2", "b7e7"],
    &["b2d2", "h9g7"],
    &["h2f2", "b9c7"],
];

impl OpeningBook {
    /// Parses and replays each line from the initial position.
    pub fn parse<S: AsRef<str>>(lines: &[Vec<S>]) -> Result<OpeningBook, RlError> {
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let mut p = Position::startpos();
            let mut moves = Vec::with_capacity(line.len());
            for s in line {
                let s = s.as_ref();
                let m: Move = s.parse().map_err(|_| RlError::Opening { line: i, reason: format!("bad move {s:?}") })?;
                p = p.apply_move(m).map_err(|_| RlError::Opening { line: i, reason: format!("illegal move {s}") })?;
                moves.push(m);
            }
            out.push(moves);
        }
        Ok(OpeningBook { lines: out })
    }

    pub fn curated() -> OpeningBook {
        let lines: Vec<Vec<&str>> = CURATED.iter().map(|l| l.to_vec()).collect();
        OpeningBook::parse(&lines).expect("curated lines replay")
    }

    pub fn curated_lines() -> Vec<Vec<String>> {
        CURATED.iter().map(|l| l.iter().map(|s| s.to_string()).collect()).collect()
    }

    /// A uniformly chosen line, or no prefix when the book is empty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[Move] {
        if self.lines.is_empty() {
            &[]
        } else {
            &self.lines[rng.gen_range(0..self.lines.len())]
        }
    }
}

/// Sampling temperatures and the ply cap for rollouts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSettings {
    pub tau_train: f64,
    pub tau_opp: f64,
    pub max_plies: u32,
}

/// One scheduled rollout game. `opponent == None` is self-play: the learner
/// moves for both sides and both sides' steps are recorded.
#[derive(Clone, Copy)]
pub struct RolloutGame<'a> {
    pub opponent: Option<&'a Network>,
    pub learner_side: Side,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    pub learner_side: Side,
    pub outcome: Outcome,
    pub plies: u32,
    pub moves: Vec<Move>,
}

impl GameSummary {
    /// +1, 0 or −1 for the learner.
    pub fn learner_score(&self) -> f64 {
        self.outcome.score_for(self.learner_side)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub trajectories: Vec<Trajectory>,
    pub games: Vec<GameSummary>,
}

struct Live {
    pos: Position,
    rng: ChaCha8Rng,
    steps: [Vec<Step>; 2],
    moves: Vec<Move>,
    outcome: Option<Outcome>,
}

/// Picks a canonical action: argmax (first maximal index) when `τ ≤ 0`,
/// otherwise a draw from the tempered masked softmax. Returns its log-probability.
fn pick<R: Rng + ?Sized>(logits: &[f32], mask: &LegalityMask, tau: f64, rng: &mut R) -> (usize, f64) {
    let legal: Vec<usize> = mask.legal_indices().collect();
    if tau <= 0.0 {
        let mut best = legal[0];
        for &i in &legal[1..] {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return (best, 0.0);
    }
    let probs = tempered_distribution(&legal.iter().map(|&i| logits[i] as f64).collect::<Vec<_>>(), tau);
    let k = sample_index(&probs, rng);
    (legal[k], probs[k].ln())
}

/// Per-game generator for rollouts.
pub fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Plays all scheduled games in lockstep, batching network evaluations per
/// mover. Each game draws from its own generator, so results do not depend
/// on the batching.
pub fn collect_games(policy: &Network, games: &[RolloutGame], book: &OpeningBook, s: &RolloutSettings, seed: u64) -> Rollout {
    let rules = DrawRules::with_cap(s.max_plies);
    let mut live: Vec<Live> = games
        .iter()
        .map(|g| {
            let mut rng = rollout_rng(seed, g.stream);
            let mut pos = Position::startpos();
            let opening = book.sample(&mut rng).to_vec();
            let mut moves = Vec::new();
            for m in opening {
                if pos.terminal_with(&rules).is_some() {
                    break;
                }
                pos = pos.apply_unchecked(m);
                moves.push(m);
            }
            Live { pos, rng, steps: [Vec::new(), Vec::new()], moves, outcome: None }
        })
        .collect();

    loop {
        for l in live.iter_mut().filter(|l| l.outcome.is_none()) {
            l.outcome = l.pos.terminal_with(&rules);
        }
        // group pending games by the network that moves next
        let mut groups: Vec<(&Network, bool, Vec<usize>)> = Vec::new();
        for (i, l) in live.iter().enumerate() {
            if l.outcome.is_some() {
                continue;
            }
            let g = &games[i];
            let learner = g.opponent.is_none() || l.pos.side_to_move() == g.learner_side;
            let net = if learner { policy } else { g.opponent.unwrap() };
            match groups.iter_mut().find(|(n, is_l, _)| std::ptr::eq(*n, net) && *is_l == learner) {
                Some((_, _, v)) => v.push(i),
                None => groups.push((net, learner, vec![i])),
            }
        }
        if groups.is_empty() {
            break;
        }
        for (net, learner, idx) in groups {
            let obs: Vec<Observation> = idx.iter().map(|&i| encode(&live[i].pos, net.feature_variant())).collect();
            let refs: Vec<&Observation> = obs.iter().collect();
            let outs = net.evaluate_batch(&refs);
            for ((&i, ob), out) in idx.iter().zip(obs).zip(outs) {
                let l = &mut live[i];
                let mover = l.pos.side_to_move();
                let mask = canonical_mask(&l.pos);
                let tau = if learner { s.tau_train } else { s.tau_opp };
                let (action, logp) = pick(&out.logits, &mask, tau, &mut l.rng);
                let m = from_canonical_index(action, mover).expect("legal index");
                if learner {
                    l.steps[mover.index()].push(Step { obs: ob, mask, action, logp, value: out.value as f64, reward: 0.0, done: false });
                }
                l.pos = l.pos.apply_unchecked(m);
                l.moves.push(m);
            }
        }
    }

    let mut out = Rollout::default();
    for (l, g) in live.into_iter().zip(games) {
        let outcome = l.outcome.expect("finished");
        let [red, black] = l.steps;
        for (side, mut steps) in [(Side::Red, red), (Side::Black, black)] {
            if let Some(last) = steps.last_mut() {
                last.reward = outcome.score_for(side);
                last.done = true;
                out.trajectories.push(Trajectory { steps, bootstrap: 0.0 });
            }
        }
        out.games.push(GameSummary { learner_side: g.learner_side, outcome, plies: l.pos.ply(), moves: l.moves });
    }
    out
}

/// `n_games` against one opponent (or self-play), colours alternating from Red.
pub fn collect<R: Rng + ?Sized>(
    policy: &Network,
    opponent: Option<&Network>,
    book: &OpeningBook,
    n_games: usize,
    s: &RolloutSettings,
    rng: &mut R,
) -> Rollout {
    let seed = rng.gen();
    let games: Vec<RolloutGame> = (0..n_games)
        .map(|i| RolloutGame { opponent, learner_side: if i % 2 == 0 { Side::Red } else { Side::Black }, stream: i as u64 })
        .collect();
    collect_games(policy, &games, book, s, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub games_per_iter: usize,
    pub tau_train: f64,
    pub max_plies: u32,
    pub lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 3,
            minibatch: 128,
            games_per_iter: 32,
            tau_train: 1.0,
            max_plies: 400,
            lr: 3e-4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.games_per_iter == 0 {
            return bad("epochs, minibatch and games_per_iter must be positive");
        }
        if !(self.tau_train > 0.0) {
            return bad("tau_train must be positive");
        }
        if self.max_plies == 0 {
            return bad("max_plies must be positive");
        }
        if !(self.lr > 0.0) || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("lr must be positive and loss coefficients non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoSample {
    pub obs: Observation,
    pub mask: LegalityMask,
    pub action: usize,
    pub old_logp: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// Flattens trajectories; value targets are `Â_t + V(s_t)`.
pub fn build_samples(trajectories: &[Trajectory], cfg: &AdvConfig) -> Vec<PpoSample> {
    let mut out = Vec::new();
    for tr in trajectories {
        let adv = tr.advantages(cfg);
        for (s, a) in tr.steps.iter().zip(adv) {
            out.push(PpoSample {
                obs: s.obs.clone(),
                mask: s.mask.clone(),
                action: s.action,
                old_logp: s.logp,
                advantage: a,
                value_target: a + s.value,
            });
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

/// Clipped-surrogate loss and gradients for one minibatch. Advantages are
/// used as given.
pub fn ppo_loss<T: Real>(net: &Network, params: &ParamSet<T>, batch: &[&PpoSample], cfg: &PpoConfig) -> (PpoStats, Vec<Tensor<T>>) {
    assert!(!batch.is_empty(), "empty batch");
    let n = batch.len();
    let mut g = Graph::<T>::new();
    let vars = params.attach(&mut g);
    let obs: Vec<&Observation> = batch.iter().map(|s| &s.obs).collect();
    let x = g.leaf(net.input_tensor(&obs));
    let heads = net.forward(&mut g, &vars, x);
    let logits = g.scale(heads.logits, T::from_f64c(1.0 / cfg.tau_train));
    let mut mask = Vec::with_capacity(n * NUM_ACTIONS);
    for s in batch {
        mask.extend_from_slice(s.mask.bits());
    }
    let mask: Rc<[bool]> = Rc::from(mask);
    let actions: Vec<usize> = batch.iter().map(|s| s.action).collect();
    let column = |v: Vec<f64>| Tensor::new(&[n], v.into_iter().map(T::from_f64c).collect()).unwrap();

    let lp = g.masked_log_prob(logits, mask.clone(), &actions);
    let old = g.leaf(column(batch.iter().map(|s| s.old_logp).collect()));
    let diff = g.sub(lp, old);
    let ratio = g.exp(diff);
    let adv = g.leaf(column(batch.iter().map(|s| s.advantage).collect()));
    let unclipped = g.mul(ratio, adv);
    let eps = T::from_f64c(cfg.clip);
    let clipped_ratio = g.clamp(ratio, T::one() - eps, T::one() + eps);
    let clipped = g.mul(clipped_ratio, adv);
    let surr = g.minimum(unclipped, clipped);
    let surr = g.mean(surr);
    let policy_loss = g.scale(surr, -T::one());

    let target = g.leaf(column(batch.iter().map(|s| s.value_target).collect()));
    let err = g.sub(heads.value, target);
    let sq = g.mul(err, err);
    let value_loss = g.mean(sq);

    let ent = g.masked_entropy(logits, mask);
    let entropy = g.mean(ent);

    let wv = g.scale(value_loss, T::from_f64c(cfg.value_coef));
    let we = g.scale(entropy, T::from_f64c(-cfg.entropy_coef));
    let loss = g.add(policy_loss, wv);
    let loss = g.add(loss, we);

    let ratios: Vec<f64> = g.value(ratio).data().iter().map(|r| r.to_f64c()).collect();
    let stats = PpoStats {
        loss: g.value(loss).item().to_f64c(),
        policy_loss: g.value(policy_loss).item().to_f64c(),
        value_loss: g.value(value_loss).item().to_f64c(),
        entropy: g.value(entropy).item().to_f64c(),
        clip_frac: ratios.iter().filter(|r| (**r - 1.0).abs() > cfg.clip).count() as f64 / n as f64,
        approx_kl: ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n as f64,
        minibatches: 1,
    };
    let grads = g.backward(loss);
    (stats, params.gradients(&g, &grads, &vars))
}

/// Normalises advantages over the whole batch, then runs `epochs` passes of
/// shuffled minibatches. Returned statistics are minibatch averages.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut Network,
    adam: &mut AdamState<f32>,
    samples: &[PpoSample],
    cfg: &PpoConfig,
    rng: &mut R,
) -> PpoStats {
    if samples.is_empty() {
        return PpoStats::default();
    }
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    normalize_advantages(&mut adv);
    let samples: Vec<PpoSample> = samples.iter().zip(adv).map(|(s, a)| PpoSample { advantage: a, ..s.clone() }).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut total = PpoStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&PpoSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (st, grads) = ppo_loss(net, net.params(), &batch, cfg);
            adam.step(net.params_mut().tensors_mut(), &grads);
            total.loss += st.loss;
            total.policy_loss += st.policy_loss;
            total.value_loss += st.value_loss;
            total.entropy += st.entropy;
            total.clip_frac += st.clip_frac;
            total.approx_kl += st.approx_kl;
            total.minibatches += 1;
        }
    }
    let k = total.minibatches as f64;
    PpoStats {
        loss: total.loss / k,
        policy_loss: total.policy_loss / k,
        value_loss: total.value_loss / k,
        entropy: total.entropy / k,
        clip_frac: total.clip_frac / k,
        approx_kl: total.approx_kl / k,
        minibatches: total.minibatches,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub iterations: usize,
    pub ppo: PpoConfig,
    pub adv: AdvConfig,
    pub pool: PoolConfig,
    /// ICCS opening lines; an empty list disables forced openings.
    pub openings: Vec<Vec<String>>,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            iterations: 100,
            ppo: PpoConfig::default(),
            adv: AdvConfig::default(),
            pool: PoolConfig::default(),
            openings: OpeningBook::curated_lines(),
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<OpeningBook, RlError> {
        self.ppo.validate()?;
        self.adv.validate()?;
        self.pool.validate()?;
        OpeningBook::parse(&self.openings)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub id: u64,
    pub r: f64,
    pub games: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub iteration: usize,
    pub mean_episode_length: f64,
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
    pub samples: usize,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub entropy: f64,
    pub gated: bool,
    pub pool: Vec<PoolSnapshot>,
}

pub struct RlTrainer {
    pub cfg: RlConfig,
    pub net: Network,
    pub adam: AdamState<f32>,
    pub pool: Pool,
    pub book: OpeningBook,
    pub iteration: usize,
}

impl RlTrainer {
    /// Starts from a supervised checkpoint, which also seeds the pool.
    pub fn new(cfg: RlConfig, sl_net: Network) -> Result<RlTrainer, RlError> {
        let pool = Pool::init(sl_net.clone(), cfg.pool.clone())?;
        let adam = AdamState::new(AdamConfig::with_lr(cfg.ppo.lr), sl_net.params().tensors());
        RlTrainer::resume(cfg, sl_net, adam, pool, 0)
    }

    pub fn resume(cfg: RlConfig, net: Network, adam: AdamState<f32>, pool: Pool, iteration: usize) -> Result<RlTrainer, RlError> {
        let book = cfg.validate()?;
        if adam.m.len() != net.params().len() {
            return Err(RlError::Config("optimizer state does not match the network".into()));
        }
        Ok(RlTrainer { cfg, net, adam, pool, book, iteration })
    }

    fn settings(&self) -> RolloutSettings {
        RolloutSettings { tau_train: self.cfg.ppo.tau_train, tau_opp: self.cfg.pool.tau_opp, max_plies: self.cfg.ppo.max_plies }
    }

    /// Select opponents, collect, estimate advantages, update, score the pool, maybe gate.
    pub fn iterate(&mut self) -> RlMetrics {
        let it = self.iteration as u64;
        let mut rng = rollout_rng(self.cfg.seed, u64::MAX - it);
        let n = self.cfg.ppo.games_per_iter;
        let ids: Vec<u64> = (0..n).map(|_| self.pool.select(&mut rng)).collect();
        let rollout = {
            let games: Vec<RolloutGame> = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    let global = it * n as u64 + i as u64;
                    RolloutGame {
                        opponent: Some(self.pool.entry(id).expect("selected from pool").network()),
                        learner_side: if global % 2 == 0 { Side::Red } else { Side::Black },
                        stream: global,
                    }
                })
                .collect();
            collect_games(&self.net, &games, &self.book, &self.settings(), self.cfg.seed)
        };
        let samples = build_samples(&rollout.trajectories, &self.cfg.adv);
        let stats = ppo_update(&mut self.net, &mut self.adam, &samples, &self.cfg.ppo, &mut rng);

        let (mut wins, mut draws, mut losses) = (0, 0, 0);
        for (g, &id) in rollout.games.iter().zip(&ids) {
            let z = g.learner_score();
            match GameScore::from_result(z) {
                GameScore::Win => wins += 1,
                GameScore::Draw => draws += 1,
                GameScore::Loss => losses += 1,
            }
            self.pool.record_result(id, GameScore::from_result(z)).expect("selected from pool");
        }
        let gated = self.pool.maybe_gate(&self.net);
        self.iteration += 1;
        RlMetrics {
            iteration: self.iteration,
            mean_episode_length: rollout.games.iter().map(|g| g.plies as f64).sum::<f64>() / n as f64,
            wins,
            draws,
            losses,
            samples: samples.len(),
            loss: stats.loss,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_frac: stats.clip_frac,
            approx_kl: stats.approx_kl,
            entropy: stats.entropy,
            gated,
            pool: self.pool.entries().iter().map(|e| PoolSnapshot { id: e.id, r: e.r, games: e.games }).collect(),
        }
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self, mut on_metrics: impl FnMut(&RlTrainer, &RlMetrics)) -> Vec<RlMetrics> {
        let mut out = Vec::new();
        while self.iteration < self.cfg.iterations {
            let m = self.iterate();
            on_metrics(self, &m);
            out.push(m);
        }
        out
    }
}
