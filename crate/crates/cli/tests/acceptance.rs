//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to run
//! a subset: `cargo test -p xq-cli --test acceptance -- 1 3 9`.

use std::fs;
use std::io::Cursor;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use xq_core::arena::{play_match, MatchConfig, NetworkAgent, RandomAgent, SearchAgent};
use xq_core::autograd::{grad_check, standard_layer_set, AdamConfig, AdamState};
use xq_core::encoding::{canonical_index, canonical_mask, encode, legality_mask, FeatureVariant};
use xq_core::models::{masked_distribution, sample_index, NetConfig, Network};
use xq_core::pool::{GameScore, Pool, PoolConfig};
use xq_core::records::{sample_weight, synthesize_games, CurveParams, SamplingMode, StepSampler, SynthConfig};
use xq_core::rl::{build_samples, gae, ppo_loss, ppo_update, vect, AdvConfig, PpoConfig, PpoSample, RlConfig, RlTrainer, Step, Trajectory};
use xq_core::rules::{Move, Position, Side};
use xq_core::search::{evaluate, order_moves, search, EvalWeights, SearchConfig, MATE};
use xq_core::sl::{build_sl_data, evaluate_stagewise, SlConfig, SlTrainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_positions(seed: u64, n: usize, max_plies: usize) -> Vec<Position> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut p = Position::startpos();
        for _ in 0..rng.gen_range(0..=max_plies) {
            let moves = p.legal_moves();
            if moves.is_empty() {
                break;
            }
            p = p.apply_unchecked(moves[rng.gen_range(0..moves.len())]);
        }
        if !p.legal_moves().is_empty() {
            out.push(p);
        }
    }
    out
}

fn movegen() -> Outcome {
    let t = Instant::now();
    let expected = [44u64, 1_920, 79_666, 3_290_240];
    let got: Vec<u64> = (1..=4).map(|d| Position::startpos().perft(d)).collect();
    let secs = t.elapsed().as_secs_f64();
    check(got == expected && secs < 60.0, format!("perft 1-4 = {got:?} in {secs:.1}s"))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (name, spec) in standard_layer_set() {
        let e = grad_check(&spec, 0).map_err(|e| format!("{name}: {e}"))?;
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst.0 < 1e-4 && secs < 120.0, format!("max relative error {:.2e} ({}) in {secs:.1}s", worst.0, worst.1))
}

fn random_episode(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let n = rng.gen_range(1..80);
    let rewards = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bootstrap = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-1.0..1.0) };
    (rewards, values, bootstrap)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn estimators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut e_full, mut e_tel, mut e_gae) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (r, v, b) = random_episode(&mut rng);
        let n = r.len();
        let (gamma, lambda) = (rng.gen_range(0.9..=1.0), rng.gen_range(0.0..=1.0));
        for cutoff in [n, n + 1, n + 17, usize::MAX] {
            e_full = e_full.max(max_diff(&vect(&r, &v, b, gamma, lambda, cutoff), &gae(&r, &v, b, gamma, lambda)));
        }
        // γ = λ = 1: Â_t = Σ_{k<h} r_{t+k} + V_{t+h} − V_t with h = min(L + 1, n − t)
        let cutoff = rng.gen_range(0..=n + 2);
        let got = vect(&r, &v, b, 1.0, 1.0, cutoff);
        let closed: Vec<f64> = (0..n)
            .map(|t| {
                let end = (t + cutoff + 1).min(n);
                let tail = if end == n { b } else { v[end] };
                r[t..end].iter().sum::<f64>() + tail - v[t]
            })
            .collect();
        e_tel = e_tel.max(max_diff(&got, &closed));
        // double loop over δ
        let value_at = |k: usize| if k < n { v[k] } else { b };
        let brute: Vec<f64> = (0..n)
            .map(|t| (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * (r[k] + gamma * value_at(k + 1) - v[k])).sum())
            .collect();
        e_gae = e_gae.max(max_diff(&gae(&r, &v, b, gamma, lambda), &brute));
    }
    check(
        e_full <= 1e-12 && e_tel <= 1e-9 && e_gae <= 1e-9,
        format!("vect-vs-gae {e_full:.1e}, telescoped {e_tel:.1e}, brute-force gae {e_gae:.1e}"),
    )
}

fn sampling_curve() -> Outcome {
    let total = 40;
    let sampler = StepSampler::new(vec![total], SamplingMode::Curve, CurveParams::default()).map_err(|e| e.to_string())?;
    let w: Vec<f64> = (0..total).map(|t| sample_weight(t, total).unwrap()).collect();
    let z: f64 = w.iter().sum();
    let n = 100_000;
    let mut counts = vec![0usize; total];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..n {
        counts[sampler.sample(&mut rng).1] += 1;
    }
    let stat: f64 = counts.iter().zip(&w).map(|(&c, &wi)| (c as f64 - n as f64 * wi / z).powi(2) / (n as f64 * wi / z)).sum();
    let p = 1.0 - ChiSquared::new((total - 1) as f64).unwrap().cdf(stat);
    let w0 = sample_weight(0, total).unwrap();
    check(p > 0.01 && w0 == 0.5, format!("chi-square p = {p:.3}, w(0) = {w0}"))
}

fn opponent_pool() -> Outcome {
    let net = |s| Network::build(NetConfig::mod_resnet(1, 4).with_head_dim(4).with_value_hidden(4), s).unwrap();
    let cfg = PoolConfig { tau_sel: 1.0, ema_alpha: 1.0, gate_threshold: 0.5, min_games: 1, ..PoolConfig::default() };
    let mut pool = Pool::init(net(0), cfg).map_err(|e| e.to_string())?;
    let mut gate_ok = true;
    // fresh entry: min-games not met
    gate_ok &= !pool.maybe_gate(&net(1));
    pool.record_result(0, GameScore::Win).unwrap();
    gate_ok &= pool.maybe_gate(&net(1)) && pool.len() == 2;
    pool.record_result(0, GameScore::Win).unwrap();
    pool.record_result(1, GameScore::Loss).unwrap();
    // r = [1, 0]: one entry below θ
    gate_ok &= !pool.maybe_gate(&net(2));
    let probs = pool.probabilities();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let picked_weak = (0..n).filter(|_| pool.select(&mut rng) == 1).count() as f64 / n as f64;
    let freq_ok = (picked_weak - 0.7311).abs() < 0.02 && (1.0 - picked_weak - 0.2689).abs() < 0.02;
    // r = [0.5, 0.5] sits exactly on θ
    pool.record_result(0, GameScore::Draw).unwrap();
    pool.record_result(1, GameScore::Draw).unwrap();
    gate_ok &= pool.maybe_gate(&net(3)) && pool.len() == 3;
    check(
        freq_ok && gate_ok && (probs[1] - 0.731_058_578_630_004_9).abs() < 1e-12,
        format!("selection frequency {picked_weak:.4} / {:.4}, gate checks {}", 1.0 - picked_weak, if gate_ok { "ok" } else { "wrong" }),
    )
}

fn masking() -> Outcome {
    let net = Network::build(NetConfig::mod_resnet(1, 8).with_head_dim(8).with_value_hidden(8), 6).unwrap();
    let mut worst_sum = 0.0f64;
    let mut leaks = 0;
    let mut popcount_errors = 0;
    for p in random_positions(6, 1000, 80) {
        let legal = p.legal_moves().len();
        if legality_mask(&p).popcount() != legal || canonical_mask(&p).popcount() != legal {
            popcount_errors += 1;
        }
        let mask = canonical_mask(&p);
        let inf = net.infer(&encode(&p, FeatureVariant::BoardAllyEnemy), &mask);
        leaks += inf.probs.iter().enumerate().filter(|&(i, &x)| !mask.get(i) && x != 0.0).count();
        let s: f64 = inf.probs.iter().map(|&x| x as f64).sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    check(
        leaks == 0 && popcount_errors == 0 && worst_sum <= 1e-6,
        format!("illegal mass entries {leaks}, popcount mismatches {popcount_errors}, max |Σp − 1| = {worst_sum:.1e}"),
    )
}

fn sl_overfit() -> Outcome {
    let t = Instant::now();
    let records = synthesize_games(&SynthConfig { games: 40, draw_move_cap: 100, ..SynthConfig::default() }, 1).map_err(|e| e.to_string())?;
    let cfg = SlConfig { batch_size: 32, steps: 2000, lr: 3e-3, dataset_size: 256, eval_fraction: 0.0, log_every: 100, ..SlConfig::default() };
    let data = build_sl_data(&records, &cfg, FeatureVariant::BoardAllyEnemy).map_err(|e| e.to_string())?;
    if data.train.len() != 256 {
        return Err(format!("dataset has {} samples", data.train.len()));
    }
    let net = Network::build(NetConfig::mod_resnet(2, 32), 0).unwrap();
    let mut trainer = SlTrainer::new(cfg, net).map_err(|e| e.to_string())?;
    let mut acc = 0.0;
    while trainer.step < 2000 {
        trainer.train_step(&data.train);
        if trainer.step % 50 == 0 {
            acc = evaluate_stagewise(&trainer.net, &data.train).overall().unwrap_or(0.0);
            if acc >= 0.95 {
                break;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(acc >= 0.95 && secs < 300.0, format!("top-1 {:.1}% after {} steps in {secs:.1}s", 100.0 * acc, trainer.step))
}

fn bandit_sample(net: &Network, p: &Position, action: usize, advantage: f64, logp_shift: f64) -> PpoSample {
    let mask = canonical_mask(p);
    let obs = encode(p, net.feature_variant());
    let probs = masked_distribution(&net.evaluate(&obs).logits, &mask, 1.0);
    PpoSample { obs, mask, action, old_logp: (probs[action] as f64).ln() + logp_shift, advantage, value_target: 0.0 }
}

fn ppo_sanity() -> Outcome {
    let tiny = NetConfig::mod_resnet(1, 8).with_head_dim(8).with_value_hidden(8);
    let p = Position::from_fen("5k3/9/9/9/9/9/9/9/9/3K5 w").unwrap();
    let mask = canonical_mask(&p);
    if mask.popcount() != 2 {
        return Err("bandit position must have two moves".into());
    }
    let good = canonical_index("d0d1".parse::<Move>().unwrap(), Side::Red);

    // clipped samples: ρ outside [1 − ε, 1 + ε] on the side the advantage pushes towards
    let net = Network::build(tiny.clone(), 1).unwrap();
    let params = net.params().cast::<f64>();
    let policy_only = PpoConfig { entropy_coef: 0.0, value_coef: 0.0, ..PpoConfig::default() };
    let zero = |s: &PpoSample| ppo_loss(&net, &params, &[s], &policy_only).1.iter().all(|g| g.data().iter().all(|&x| x == 0.0));
    let clip_ok = zero(&bandit_sample(&net, &p, good, 1.0, -0.5))
        && zero(&bandit_sample(&net, &p, good, -1.0, 0.5))
        && !zero(&bandit_sample(&net, &p, good, 1.0, 0.0));

    let mut net = Network::build(tiny, 3).unwrap();
    let cfg = PpoConfig { lr: 3e-3, minibatch: 16, epochs: 3, ..PpoConfig::default() };
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), net.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = encode(&p, net.feature_variant());
    let prob_good = |net: &Network| masked_distribution(&net.evaluate(&obs).logits, &mask, 1.0)[good] as f64;
    let legal: Vec<usize> = mask.legal_indices().collect();
    let mut reached = None;
    for it in 1..=500 {
        let out = net.evaluate(&obs);
        let probs = masked_distribution(&out.logits, &mask, 1.0);
        let weights: Vec<f64> = legal.iter().map(|&i| probs[i] as f64).collect();
        let trajectories: Vec<Trajectory> = (0..16)
            .map(|_| {
                let k = sample_index(&weights, &mut rng);
                let action = legal[k];
                let reward = if action == good { 1.0 } else { 0.0 };
                let step = Step {
                    obs: obs.clone(),
                    mask: mask.clone(),
                    action,
                    logp: weights[k].ln(),
                    value: out.value as f64,
                    reward,
                    done: true,
                };
                Trajectory { steps: vec![step], bootstrap: 0.0 }
            })
            .collect();
        ppo_update(&mut net, &mut adam, &build_samples(&trajectories, &AdvConfig::default()), &cfg, &mut rng);
        if prob_good(&net) >= 0.95 {
            reached = Some(it);
            break;
        }
    }
    let detail = match reached {
        Some(it) => format!("better arm at 0.95 after {it} iterations"),
        None => format!("better arm only at {:.3} after 500 iterations", prob_good(&net)),
    };
    check(reached.is_some() && clip_ok, format!("{detail}; clipped samples give zero gradient: {clip_ok}"))
}

fn negamax(p: &Position, depth: u32, ply: i32, w: &EvalWeights) -> (i32, Option<Move>) {
    let mut moves = p.legal_moves();
    if moves.is_empty() {
        return (-(MATE - ply), None);
    }
    if depth == 0 {
        return (evaluate(p, w), None);
    }
    order_moves(p, &mut moves);
    let mut best: Option<(i32, Move)> = None;
    for m in moves {
        let s = -negamax(&p.apply_unchecked(m), depth - 1, ply + 1, w).0;
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, m));
        }
    }
    let (s, m) = best.unwrap();
    (s, Some(m))
}

fn alpha_beta() -> Outcome {
    let w = EvalWeights::default();
    let mut mismatches = 0;
    let positions = random_positions(9, 200, 80);
    for p in &positions {
        for depth in 1..=3 {
            let r = search(p, &SearchConfig::depth(depth)).map_err(|e| e.to_string())?;
            if (r.score, Some(r.best)) != negamax(p, depth, 0, &w) {
                mismatches += 1;
            }
        }
    }
    let cfg = MatchConfig { games: 200, seed: 9, ..MatchConfig::default() };
    let report = play_match(&SearchAgent::depth(3), &RandomAgent, &cfg).map_err(|e| e.to_string())?;
    let wins = report.wins as f64 / report.games as f64;
    check(
        mismatches == 0 && wins >= 0.95,
        format!("{mismatches} mismatches over {} searches; depth-3 wins {:.1}% against random", positions.len() * 3, 100.0 * wins),
    )
}

/// The documented smoke profile: synthesized games, a one-block 16-channel
/// network, 60-ply games, 30 PPO iterations against the opponent pool.
fn smoke_attempt(seed: u64) -> Result<(bool, String), String> {
    let t = Instant::now();
    let records = synthesize_games(&SynthConfig { games: 60, draw_move_cap: 100, ..SynthConfig::default() }, seed).map_err(|e| e.to_string())?;
    let sl_cfg = SlConfig { batch_size: 32, steps: 300, lr: 3e-3, dataset_size: 2048, eval_fraction: 0.1, log_every: 100, seed, ..SlConfig::default() };
    let data = build_sl_data(&records, &sl_cfg, FeatureVariant::BoardAllyEnemy).map_err(|e| e.to_string())?;
    let net = Network::build(NetConfig::mod_resnet(1, 16).with_head_dim(16).with_value_hidden(16), seed).unwrap();
    let mut sl = SlTrainer::new(sl_cfg, net).map_err(|e| e.to_string())?;
    sl.run(&data, |_, _| {});
    let frozen = sl.net.clone();
    let rl_cfg = RlConfig {
        iterations: 30,
        ppo: PpoConfig { games_per_iter: 32, max_plies: 60, lr: 1e-3, ..PpoConfig::default() },
        seed,
        ..RlConfig::default()
    };
    let mut rl = RlTrainer::new(rl_cfg, sl.net).map_err(|e| e.to_string())?;
    rl.run(|_, _| {});
    let cfg = MatchConfig { games: 400, ply_cap: 60, seed: seed + 1000, ..MatchConfig::default() };
    let r = play_match(&NetworkAgent::new(rl.net, 1.0, "rl"), &NetworkAgent::new(frozen, 1.0, "sl"), &cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let pass = r.score_ci.0 > 0.5 && elapsed < Duration::from_secs(30 * 60);
    Ok((
        pass,
        format!(
            "seed {seed}: W/D/L {}/{}/{}, score {:.3}, Wilson lower bound {:.3}, {:.0}s",
            r.wins,
            r.draws,
            r.losses,
            r.score,
            r.score_ci.0,
            elapsed.as_secs_f64()
        ),
    ))
}

fn rl_smoke() -> Outcome {
    let mut attempts = Vec::new();
    for seed in 0..3 {
        let (pass, detail) = smoke_attempt(seed)?;
        attempts.push(detail);
        if pass {
            return Ok(attempts.join("; "));
        }
    }
    Err(attempts.join("; "))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["xq"];
    argv.extend_from_slice(args);
    let parsed = xq_cli::Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    match xq_cli::run(parsed, &mut Cursor::new(Vec::new()), &mut out, &mut err) {
        0 => Ok(()),
        code => Err(format!("exit {code}: {}", String::from_utf8_lossy(&err))),
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<bool, String> {
    for n in names {
        if fs::read(a.join(n)).map_err(|e| e.to_string())? != fs::read(b.join(n)).map_err(|e| e.to_string())? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = d.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"data": {"synth": {"games": 8, "draw_move_cap": 60}},
            "model": {"arch": {"kind": "ModResNetMicro", "blocks": 1, "channels": 8}, "head_dim": 8, "value_hidden": 8},
            "sl": {"batch_size": 8, "steps": 20, "dataset_size": 128, "log_every": 5}}"#,
    )
    .map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    for run in ["sl1", "sl2"] {
        cli(&["train-sl", "--config", &s(&cfg), "--out", &s(&d.join(run)), "--seed", "11"])?;
    }
    let sl_same = same_files(&d.join("sl1"), &d.join("sl2"), &["metrics.jsonl", "model.xqnp", "optimizer.bin"])?;
    let ck = format!("checkpoint:{}", s(&d.join("sl1/model.xqnp")));
    for run in ["a1.json", "a2.json"] {
        cli(&["arena", "--a", &ck, "--b", "alphabeta:1", "--games", "8", "--ply-cap", "80", "--seed", "11", "--out", &s(&d.join(run))])?;
    }
    let arena_same = fs::read(d.join("a1.json")).map_err(|e| e.to_string())? == fs::read(d.join("a2.json")).map_err(|e| e.to_string())?;
    check(sl_same && arena_same, format!("train-sl outputs identical: {sl_same}; arena reports identical: {arena_same}"))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "movegen soundness", movegen),
    (2, "gradient correctness", gradients),
    (3, "estimator identities", estimators),
    (4, "sampling-curve fidelity", sampling_curve),
    (5, "opponent selection and gating", opponent_pool),
    (6, "action masking", masking),
    (7, "supervised overfit", sl_overfit),
    (8, "PPO sanity", ppo_sanity),
    (9, "alpha-beta soundness", alpha_beta),
    (10, "RL smoke improvement", rl_smoke),
    (11, "determinism", determinism),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let quiet_panics = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} {name:<32} PASS  {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name:<32} FAIL  {d} [{secs:.1}s]");
            }
        }
    }
    panic::set_hook(quiet_panics);
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
