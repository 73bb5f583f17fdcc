//! Supervised phase: masked cross-entropy on labelled moves plus an auxiliary
//! value loss on the successor position.
//!
//! The value head always speaks for the side to move, so the successor's value
//! is negated before it is compared with the final result of the mover.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AdamConfig, AdamState, Graph, ParamSet, Real, Tensor};
use crate::encoding::{canonical_index, canonical_mask, encode, FeatureVariant, LegalityMask, Observation, NUM_ACTIONS};
use crate::models::{ModelError, Network};
use crate::records::{draw_from_records, CurveParams, GameRecord, RecordError, SamplePoint, SamplingMode};

#[derive(Debug, Error)]
pub enum SlError {
    #[error("label {mv} of sample {index} is not a legal move")]
    IllegalLabel { index: usize, mv: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    /// Weight α of the value term.
    pub aux_weight: f64,
    pub sampling: SamplingMode,
    pub curve: CurveParams,
    /// Training positions drawn (with the sampling curve) from the training games.
    pub dataset_size: usize,
    /// Fraction of games held out for stage-wise evaluation.
    pub eval_fraction: f64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig {
            batch_size: 32,
            steps: 1000,
            lr: 1e-3,
            aux_weight: 0.5,
            sampling: SamplingMode::Curve,
            curve: CurveParams::default(),
            dataset_size: 4096,
            eval_fraction: 0.1,
            log_every: 100,
            seed: 0,
        }
    }
}

impl SlConfig {
    pub fn validate(&self) -> Result<(), SlError> {
        if self.batch_size == 0 {
            return Err(SlError::Config("batch_size must be at least 1".into()));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(SlError::Config("aux_weight must be finite and non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SlError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(SlError::Config("eval_fraction must be in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(SlError::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// A sample encoded for the network, in the mover's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub obs: Observation,
    pub successor: Observation,
    pub mask: LegalityMask,
    pub target: usize,
    /// Final result for the mover: +1, 0 or -1.
    pub z: f32,
    pub t: usize,
    pub total: usize,
}

pub fn prepare(s: &SamplePoint, variant: FeatureVariant, index: usize) -> Result<PreparedSample, SlError> {
    let p = &s.position;
    if !p.is_legal(s.chosen_move) {
        return Err(SlError::IllegalLabel { index, mv: s.chosen_move.to_string() });
    }
    Ok(PreparedSample {
        obs: encode(p, variant),
        successor: encode(&p.apply_unchecked(s.chosen_move), variant),
        mask: canonical_mask(p),
        target: canonical_index(s.chosen_move, p.side_to_move()),
        z: s.final_result as f32,
        t: s.t,
        total: s.total,
    })
}

pub fn prepare_all(samples: &[SamplePoint], variant: FeatureVariant) -> Result<Vec<PreparedSample>, SlError> {
    samples.iter().enumerate().map(|(i, s)| prepare(s, variant, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub policy_ce: f64,
    pub value_mse: f64,
}

/// Batch loss and parameter gradients, on any float width.
pub fn sl_loss_with<T: Real>(
    net: &Network,
    params: &ParamSet<T>,
    batch: &[&PreparedSample],
    alpha: f64,
) -> (LossBreakdown, Vec<Tensor<T>>) {
    assert!(!batch.is_empty(), "empty batch");
    let mut g = Graph::<T>::new();
    let vars = params.attach(&mut g);
    let obs: Vec<&Observation> = batch.iter().map(|s| &s.obs).collect();
    let x = g.leaf(net.input_tensor(&obs));
    let heads = net.forward(&mut g, &vars, x);
    let mut mask = Vec::with_capacity(batch.len() * NUM_ACTIONS);
    for s in batch {
        mask.extend_from_slice(s.mask.bits());
    }
    let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
    let lp = g.masked_log_prob(heads.logits, Rc::from(mask), &targets);
    let lp = g.mean(lp);
    let ce = g.scale(lp, -T::one());

    let (loss, mse) = if alpha > 0.0 {
        let succ: Vec<&Observation> = batch.iter().map(|s| &s.successor).collect();
        let xs = g.leaf(net.input_tensor(&succ));
        let sh = net.forward(&mut g, &vars, xs);
        // (−v_succ − z)² = (v_succ + z)²
        let z = g.leaf(Tensor::new(&[batch.len()], batch.iter().map(|s| T::from_f64c(s.z as f64)).collect()).unwrap());
        let d = g.add(sh.value, z);
        let sq = g.mul(d, d);
        let mse = g.mean(sq);
        let weighted = g.scale(mse, T::from_f64c(alpha));
        (g.add(ce, weighted), Some(mse))
    } else {
        (ce, None)
    };
    let breakdown = LossBreakdown {
        loss: g.value(loss).item().to_f64c(),
        policy_ce: g.value(ce).item().to_f64c(),
        value_mse: mse.map_or(0.0, |m| g.value(m).item().to_f64c()),
    };
    let grads = g.backward(loss);
    (breakdown, params.gradients(&g, &grads, &vars))
}

/// Loss and f32 gradients for a batch of labelled positions.
pub fn sl_loss(net: &Network, batch: &[SamplePoint], alpha: f64) -> Result<(LossBreakdown, Vec<Tensor<f32>>), SlError> {
    let prepared = prepare_all(batch, net.feature_variant())?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    Ok(sl_loss_with(net, net.params(), &refs, alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    First,
    Mid,
    Last,
}

impl Stage {
    /// Thirds of the game: `t < T/3`, `t < 2T/3`, rest.
    pub fn of(t: usize, total: usize) -> Stage {
        if 3 * t < total {
            Stage::First
        } else if 3 * t < 2 * total {
            Stage::Mid
        } else {
            Stage::Last
        }
    }
}

/// Top-1 accuracy per stage; `None` when a stage has no samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub accuracy_first: Option<f64>,
    pub accuracy_mid: Option<f64>,
    pub accuracy_last: Option<f64>,
    pub counts: [usize; 3],
    pub correct: [usize; 3],
}

impl StageMetrics {
    pub fn from_hits(hits: impl IntoIterator<Item = (usize, usize, bool)>) -> StageMetrics {
        let mut m = StageMetrics::default();
        for (t, total, ok) in hits {
            let i = Stage::of(t, total) as usize;
            m.counts[i] += 1;
            m.correct[i] += ok as usize;
        }
        let acc = |i: usize| (m.counts[i] > 0).then(|| m.correct[i] as f64 / m.counts[i] as f64);
        m.accuracy_first = acc(0);
        m.accuracy_mid = acc(1);
        m.accuracy_last = acc(2);
        m
    }

    pub fn overall(&self) -> Option<f64> {
        let n: usize = self.counts.iter().sum();
        (n > 0).then(|| self.correct.iter().sum::<usize>() as f64 / n as f64)
    }
}

/// Masked argmax of the network's policy, lowest canonical index on ties.
pub fn predictions(net: &Network, samples: &[PreparedSample]) -> Vec<usize> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let obs: Vec<&Observation> = chunk.iter().map(|s| &s.obs).collect();
        for (s, o) in chunk.iter().zip(net.evaluate_batch(&obs)) {
            let best = s
                .mask
                .legal_indices()
                .fold(None::<usize>, |b, i| match b {
                    Some(j) if o.logits[j] >= o.logits[i] => Some(j),
                    _ => Some(i),
                })
                .expect("non-terminal sample");
            out.push(best);
        }
    }
    out
}

pub fn evaluate_stagewise(net: &Network, samples: &[PreparedSample]) -> StageMetrics {
    let pred = predictions(net, samples);
    StageMetrics::from_hits(samples.iter().zip(pred).map(|(s, p)| (s.t, s.total, p == s.target)))
}

/// Training and held-out samples built from cleaned records.
pub struct SlData {
    pub train: Vec<PreparedSample>,
    /// Every position of the held-out games.
    pub eval: Vec<PreparedSample>,
}

/// Holds out `eval_fraction` of the games, then draws `dataset_size` training
/// positions from the rest with the configured sampling curve.
pub fn build_sl_data(records: &[GameRecord], cfg: &SlConfig, variant: FeatureVariant) -> Result<SlData, SlError> {
    cfg.validate()?;
    let usable: Vec<&GameRecord> = records.iter().filter(|r| r.plies() > 0).collect();
    if usable.is_empty() {
        return Err(SlError::Records(RecordError::EmptyDataset));
    }
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a));
    let n_eval = if usable.len() >= 2 { ((usable.len() as f64 * cfg.eval_fraction).round() as usize).min(usable.len() - 1) } else { 0 };
    let (eval_ids, train_ids) = order.split_at(n_eval);
    let train_games: Vec<GameRecord> = train_ids.iter().map(|&i| usable[i].clone()).collect();
    let drawn = draw_from_records(&train_games, cfg.dataset_size, cfg.sampling, cfg.curve, cfg.seed)?;
    let mut eval_points = Vec::new();
    let mut eval_ids = eval_ids.to_vec();
    eval_ids.sort_unstable();
    for i in eval_ids {
        for t in 0..usable[i].plies() {
            eval_points.push(SamplePoint::from_record(usable[i], t));
        }
    }
    Ok(SlData { train: prepare_all(&drawn, variant)?, eval: prepare_all(&eval_points, variant)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlMetrics {
    pub step: u64,
    pub loss: f64,
    pub policy_ce: f64,
    pub value_mse: f64,
    pub train_acc: Option<f64>,
    pub acc_first: Option<f64>,
    pub acc_mid: Option<f64>,
    pub acc_last: Option<f64>,
}

/// Network, optimizer and step counter; everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct SlTrainer {
    pub cfg: SlConfig,
    pub net: Network,
    pub adam: AdamState<f32>,
    pub step: u64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

impl SlTrainer {
    pub fn new(cfg: SlConfig, net: Network) -> Result<SlTrainer, SlError> {
        cfg.validate()?;
        let adam = AdamState::new(AdamConfig::with_lr(cfg.lr), net.params().tensors());
        Ok(SlTrainer { cfg, net, adam, step: 0 })
    }

    pub fn resume(cfg: SlConfig, net: Network, adam: AdamState<f32>) -> Result<SlTrainer, SlError> {
        cfg.validate()?;
        if adam.m.len() != net.params().len() || adam.m.iter().zip(net.params().tensors()).any(|(m, p)| m.shape() != p.shape()) {
            return Err(SlError::Config("optimizer state does not match the network".into()));
        }
        let step = adam.step;
        Ok(SlTrainer { cfg, net, adam, step })
    }

    /// One optimizer step on a batch drawn with replacement; the batch depends only on (seed, step).
    pub fn train_step(&mut self, train: &[PreparedSample]) -> LossBreakdown {
        assert!(!train.is_empty(), "empty training set");
        let mut rng = step_rng(self.cfg.seed, self.step);
        let batch: Vec<&PreparedSample> =
            (0..self.cfg.batch_size).map(|_| &train[rng.gen_range(0..train.len())]).collect();
        let (loss, grads) = sl_loss_with(&self.net, self.net.params(), &batch, self.cfg.aux_weight);
        self.adam.step(self.net.params_mut().tensors_mut(), &grads);
        self.step += 1;
        loss
    }

    pub fn metrics(&self, loss: LossBreakdown, train: &[PreparedSample], eval: &[PreparedSample]) -> SlMetrics {
        let train_acc = evaluate_stagewise(&self.net, train).overall();
        let st = evaluate_stagewise(&self.net, eval);
        SlMetrics {
            step: self.step,
            loss: loss.loss,
            policy_ce: loss.policy_ce,
            value_mse: loss.value_mse,
            train_acc,
            acc_first: st.accuracy_first,
            acc_mid: st.accuracy_mid,
            acc_last: st.accuracy_last,
        }
    }

    /// Trains until `cfg.steps`, reporting metrics every `log_every` steps and at the end.
    pub fn run(&mut self, data: &SlData, mut on_metrics: impl FnMut(&SlTrainer, &SlMetrics)) -> Vec<SlMetrics> {
        let mut history = Vec::new();
        while self.step < self.cfg.steps {
            let loss = self.train_step(&data.train);
            if self.step % self.cfg.log_every == 0 || self.step == self.cfg.steps {
                let m = self.metrics(loss, &data.train, &data.eval);
                on_metrics(self, &m);
                history.push(m);
            }
        }
        history
    }
}
