//! Head-to-head matches between agents, Wilson intervals and logistic Elo.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{self, Network};
use crate::rules::{DrawRules, Move, Outcome, Position, Side};
use crate::search::{search, SearchConfig};

/// 97.5% standard normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Error, PartialEq)]
pub enum ArenaError {
    #[error("invalid match config: {0}")]
    Config(String),
    #[error("comparison graph is disconnected")]
    DisconnectedGraph,
    #[error("unknown anchor agent {0}")]
    UnknownAnchor(String),
}

/// Anything that picks a move in a non-terminal position.
pub trait Agent {
    fn name(&self) -> String;
    fn choose(&self, p: &Position, rng: &mut dyn RngCore) -> Move;
}

pub struct RandomAgent;

impl Agent for RandomAgent {
    fn name(&self) -> String {
        "random".into()
    }

    fn choose(&self, p: &Position, rng: &mut dyn RngCore) -> Move {
        let moves = p.legal_moves();
        moves[rng.gen_range(0..moves.len())]
    }
}

pub struct SearchAgent {
    pub config: SearchConfig,
}

impl SearchAgent {
    pub fn depth(depth: u32) -> Self {
        SearchAgent { config: SearchConfig::depth(depth) }
    }
}

/// Alpha-beta as an agent, for matches and annotation.
pub fn make_baseline_agent(config: SearchConfig) -> SearchAgent {
    SearchAgent { config }
}

impl Agent for SearchAgent {
    fn name(&self) -> String {
        format!("alphabeta:{}", self.config.depth)
    }

    fn choose(&self, p: &Position, _rng: &mut dyn RngCore) -> Move {
        search(p, &self.config).expect("agents only move in non-terminal positions").best
    }
}

pub struct NetworkAgent {
    pub net: Network,
    pub tau: f64,
    pub label: String,
}

impl NetworkAgent {
    pub fn new(net: Network, tau: f64, label: impl Into<String>) -> Self {
        NetworkAgent { net, tau, label: label.into() }
    }
}

impl Agent for NetworkAgent {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn choose(&self, p: &Position, rng: &mut dyn RngCore) -> Move {
        models::sample_move(&self.net, p, self.tau, rng).expect("agents only move in non-terminal positions")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub games: usize,
    /// Sampling temperatures for network agents on each side.
    pub tau_a: f64,
    pub tau_b: f64,
    /// Opening lines in ICCS; each is played once with each colour assignment.
    pub openings: Vec<Vec<String>>,
    pub ply_cap: u32,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { games: 200, tau_a: 1.0, tau_b: 1.0, openings: Vec::new(), ply_cap: 400, seed: 0 }
    }
}

impl MatchConfig {
    /// Parsed, replay-checked openings.
    pub fn opening_lines(&self) -> Result<Vec<Vec<Move>>, ArenaError> {
        self.openings
            .iter()
            .enumerate()
            .map(|(i, line)| {
                let mut p = Position::startpos();
                line.iter()
                    .map(|s| {
                        let m: Move = s.parse().map_err(|_| ArenaError::Config(format!("opening {i}: bad move {s:?}")))?;
                        p = p.apply_move(m).map_err(|_| ArenaError::Config(format!("opening {i}: illegal move {s}")))?;
                        Ok(m)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ArenaError> {
        if self.games == 0 || self.games % 2 != 0 {
            return Err(ArenaError::Config("games must be a positive even number".into()));
        }
        if !self.openings.is_empty() && self.games % (2 * self.openings.len()) != 0 {
            return Err(ArenaError::Config("games must be a multiple of twice the number of openings".into()));
        }
        if self.ply_cap == 0 {
            return Err(ArenaError::Config("ply_cap must be positive".into()));
        }
        self.opening_lines().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameResult {
    pub red: String,
    pub black: String,
    pub outcome: Outcome,
    pub plies: u32,
    pub moves: Vec<Move>,
}

/// Plays one game; draws follow the repetition and ply-cap rules.
pub fn play_game(red: &dyn Agent, black: &dyn Agent, opening: &[Move], ply_cap: u32, rng: &mut dyn RngCore) -> GameResult {
    let rules = DrawRules::with_cap(ply_cap);
    let mut p = Position::startpos();
    let mut moves = Vec::new();
    for &m in opening {
        if p.terminal_with(&rules).is_some() {
            break;
        }
        p = p.apply_unchecked(m);
        moves.push(m);
    }
    let outcome = loop {
        if let Some(o) = p.terminal_with(&rules) {
            break o;
        }
        let agent = if p.side_to_move() == Side::Red { red } else { black };
        let m = agent.choose(&p, rng);
        debug_assert!(p.is_legal(m), "{} played illegal {m}", agent.name());
        p = p.apply_unchecked(m);
        moves.push(m);
    };
    GameResult { red: red.name(), black: black.name(), outcome, plies: p.ply(), moves }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: f64, n: f64, z: f64) -> (f64, f64) {
    if n <= 0.0 {
        return (0.0, 1.0);
    }
    let p = k / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if k <= 0.0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k >= n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpeningStats {
    pub opening: Vec<String>,
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub agent_a: String,
    pub agent_b: String,
    pub games: usize,
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
    pub win_rate: f64,
    pub draw_rate: f64,
    pub loss_rate: f64,
    pub win_ci: (f64, f64),
    pub draw_ci: (f64, f64),
    /// `(wins + draws / 2) / games` with its Wilson interval.
    pub score: f64,
    pub score_ci: (f64, f64),
    pub mean_length: f64,
    pub per_opening: Vec<OpeningStats>,
    /// Outcome of each game from A's side: 1, 0.5 or 0.
    pub results: Vec<f64>,
}

impl MatchReport {
    pub fn from_scores(agent_a: String, agent_b: String, scores: &[f64], lengths: &[u32]) -> MatchReport {
        let n = scores.len();
        let wins = scores.iter().filter(|&&s| s == 1.0).count();
        let draws = scores.iter().filter(|&&s| s == 0.5).count();
        let losses = n - wins - draws;
        let nf = n as f64;
        let win_rate = wins as f64 / nf;
        let draw_rate = draws as f64 / nf;
        let total_score = wins as f64 + 0.5 * draws as f64;
        MatchReport {
            agent_a,
            agent_b,
            games: n,
            wins,
            draws,
            losses,
            win_rate,
            draw_rate,
            loss_rate: 1.0 - (win_rate + draw_rate),
            win_ci: wilson_interval(wins as f64, nf, Z95),
            draw_ci: wilson_interval(draws as f64, nf, Z95),
            score: total_score / nf,
            score_ci: wilson_interval(total_score, nf, Z95),
            mean_length: lengths.iter().map(|&l| l as f64).sum::<f64>() / nf,
            per_opening: Vec::new(),
            results: scores.to_vec(),
        }
    }

    /// `"92.5%(2.8%)"`: win rate with draw rate in parentheses.
    pub fn table_cell(&self) -> String {
        format!("{:.1}%({:.1}%)", 100.0 * self.win_rate, 100.0 * self.draw_rate)
    }
}

/// Per-game generator: both games of a colour-swapped pair share a stream, so
/// swapping the agents reproduces the same games with colours exchanged.
pub fn game_rng(seed: u64, game: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((game / 2) as u64);
    rng
}

/// Plays `cfg.games` games; A takes Red in even-numbered games.
pub fn play_match(a: &dyn Agent, b: &dyn Agent, cfg: &MatchConfig) -> Result<MatchReport, ArenaError> {
    cfg.validate()?;
    let openings = cfg.opening_lines()?;
    let mut scores = Vec::with_capacity(cfg.games);
    let mut lengths = Vec::with_capacity(cfg.games);
    let mut per_opening: Vec<OpeningStats> = openings
        .iter()
        .map(|o| OpeningStats { opening: o.iter().map(Move::to_string).collect(), ..OpeningStats::default() })
        .collect();
    for g in 0..cfg.games {
        let mut rng = game_rng(cfg.seed, g);
        let opening: &[Move] = if openings.is_empty() { &[] } else { &openings[(g / 2) % openings.len()] };
        // a swapped pair (g, g^1) shares its stream; which agent is Red depends on g's parity
        let a_red = g % 2 == 0;
        let r = if a_red { play_game(a, b, opening, cfg.ply_cap, &mut rng) } else { play_game(b, a, opening, cfg.ply_cap, &mut rng) };
        let a_side = if a_red { Side::Red } else { Side::Black };
        let s = (r.outcome.score_for(a_side) + 1.0) / 2.0;
        if let Some(st) = per_opening.get_mut((g / 2) % openings.len().max(1)) {
            match s {
                x if x == 1.0 => st.wins += 1,
                x if x == 0.5 => st.draws += 1,
                _ => st.losses += 1,
            }
        }
        scores.push(s);
        lengths.push(r.plies);
    }
    let mut report = MatchReport::from_scores(a.name(), b.name(), &scores, &lengths);
    report.per_opening = per_opening;
    Ok(report)
}

/// Total score of `a` against `b` over `games` games.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub a: String,
    pub b: String,
    pub score_a: f64,
    pub games: f64,
}

impl From<&MatchReport> for PairResult {
    fn from(r: &MatchReport) -> Self {
        PairResult { a: r.agent_a.clone(), b: r.agent_b.clone(), score_a: r.score * r.games as f64, games: r.games as f64 }
    }
}

/// Ratings are clamped to this distance from the anchor when a player has a perfect or zero score.
pub const ELO_CLAMP: f64 = 3000.0;

/// Maximum-likelihood logistic (Bradley-Terry) ratings with draws as half
/// points, anchored so that `anchor` is 0.
pub fn elo(results: &[PairResult], anchor: &str) -> Result<BTreeMap<String, f64>, ArenaError> {
    let mut names: Vec<String> = results.iter().flat_map(|r| [r.a.clone(), r.b.clone()]).collect();
    names.sort();
    names.dedup();
    let idx = |s: &str| names.binary_search_by(|n| n.as_str().cmp(s)).unwrap();
    let ai = names.binary_search_by(|n| n.as_str().cmp(anchor)).map_err(|_| ArenaError::UnknownAnchor(anchor.into()))?;
    let n = names.len();
    let mut games = vec![vec![0.0f64; n]; n];
    let mut score = vec![0.0f64; n];
    for r in results {
        let (i, j) = (idx(&r.a), idx(&r.b));
        if i == j || r.games <= 0.0 {
            continue;
        }
        games[i][j] += r.games;
        games[j][i] += r.games;
        score[i] += r.score_a;
        score[j] += r.games - r.score_a;
    }
    // connectivity
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if games[i][j] > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(ArenaError::DisconnectedGraph);
    }
    // minorization-maximization on strengths γ = 10^(R/400)
    let mut gamma = vec![1.0f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let denom: f64 = (0..n).filter(|&j| games[i][j] > 0.0).map(|j| games[i][j] / (gamma[i] + gamma[j])).sum();
            next[i] = (score[i] / denom).max(1e-300);
        }
        let log_mean = next.iter().map(|g| g.ln()).sum::<f64>() / n as f64;
        next.iter_mut().for_each(|g| *g = (g.ln() - log_mean).exp());
        let delta = next.iter().zip(&gamma).map(|(a, b)| (a.ln() - b.ln()).abs()).fold(0.0, f64::max);
        gamma = next;
        if delta < 1e-12 {
            break;
        }
    }
    let base = 400.0 * gamma[ai].log10();
    Ok(names
        .iter()
        .zip(&gamma)
        .map(|(name, g)| (name.clone(), (400.0 * g.log10() - base).clamp(-ELO_CLAMP, ELO_CLAMP)))
        .collect())
}

/// Expected score of a player rated `ra` against one rated `rb`.
pub fn expected_score(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetConfig;

    struct FirstMove;

    impl Agent for FirstMove {
        fn name(&self) -> String {
            "first".into()
        }

        fn choose(&self, p: &Position, _rng: &mut dyn RngCore) -> Move {
            p.legal_moves()[0]
        }
    }

    fn small(games: usize, seed: u64) -> MatchConfig {
        MatchConfig { games, ply_cap: 60, seed, ..MatchConfig::default() }
    }

    #[test]
    fn identical_deterministic_agents_are_colour_symmetric() {
        let r = play_match(&FirstMove, &FirstMove, &small(10, 1)).unwrap();
        let pairs: Vec<(f64, f64)> = r.results.chunks(2).map(|c| (c[0], c[1])).collect();
        for (x, y) in pairs {
            assert_eq!(x + y, 1.0, "same game with colours exchanged");
        }
        assert_eq!(r.wins, r.losses);
    }

    #[test]
    fn rates_sum_to_one_exactly() {
        for seed in 0..20 {
            let r = play_match(&RandomAgent, &RandomAgent, &small(6, seed)).unwrap();
            assert_eq!(r.wins + r.draws + r.losses, r.games);
            assert_eq!(r.win_rate + r.draw_rate + r.loss_rate, 1.0);
            assert!(r.win_ci.0 <= r.win_rate && r.win_rate <= r.win_ci.1);
        }
    }

    #[test]
    fn swapping_agents_swaps_results() {
        let net = Network::build(NetConfig::mod_resnet(1, 4).with_head_dim(4).with_value_hidden(4), 1).unwrap();
        let a = NetworkAgent::new(net, 1.0, "net");
        let cfg = small(8, 5);
        let ab = play_match(&a, &RandomAgent, &cfg).unwrap();
        let ba = play_match(&RandomAgent, &a, &cfg).unwrap();
        assert_eq!((ab.wins, ab.draws, ab.losses), (ba.losses, ba.draws, ba.wins));
        for pair in 0..4 {
            assert_eq!(ab.results[2 * pair], 1.0 - ba.results[2 * pair + 1]);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_report() {
        let a = play_match(&RandomAgent, &SearchAgent::depth(1), &small(4, 9)).unwrap();
        let b = play_match(&RandomAgent, &SearchAgent::depth(1), &small(4, 9)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn openings_are_played_with_both_colours() {
        let cfg = MatchConfig { openings: vec![vec!["h2e2".into(), "h9g7".into()], vec!["b0c2".into()]], ..small(8, 2) };
        let r = play_match(&RandomAgent, &RandomAgent, &cfg).unwrap();
        assert_eq!(r.per_opening.len(), 2);
        for st in &r.per_opening {
            assert_eq!(st.wins + st.draws + st.losses, 4);
        }
        let mut rng = game_rng(0, 0);
        let line = cfg.opening_lines().unwrap();
        let g = play_game(&RandomAgent, &RandomAgent, &line[0], 60, &mut rng);
        assert_eq!(&g.moves[..2], &line[0][..]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(small(3, 0).validate().is_err());
        assert!(MatchConfig { openings: vec![vec!["a0a5".into()]], ..small(2, 0) }.validate().is_err());
        assert!(MatchConfig { openings: vec![vec![], vec![]], ..small(2, 0) }.validate().is_err());
    }

    #[test]
    fn ply_cap_forces_draws() {
        let r = play_match(&FirstMove, &FirstMove, &MatchConfig { ply_cap: 4, ..small(2, 0) }).unwrap();
        assert_eq!(r.draws, 2);
        assert_eq!(r.mean_length, 4.0);
    }

    #[test]
    fn table_cell_format() {
        let mut scores = vec![1.0; 185];
        scores.extend(vec![0.5; 6]);
        scores.extend(vec![0.0; 9]);
        let r = MatchReport::from_scores("a".into(), "b".into(), &scores, &vec![10; 200]);
        assert_eq!(r.table_cell(), "92.5%(3.0%)");
    }

    #[test]
    fn wilson_interval_properties() {
        let (lo, hi) = wilson_interval(50.0, 100.0, Z95);
        assert!((lo - 0.403832).abs() < 1e-5 && (hi - 0.596168).abs() < 1e-5);
        let width = |n: f64| {
            let (lo, hi) = wilson_interval(0.3 * n, n, Z95);
            hi - lo
        };
        assert!((width(100.0) / width(400.0) - 2.0).abs() < 0.05);
        assert!((width(10_000.0) / width(40_000.0) - 2.0).abs() < 1e-3);
        assert_eq!(wilson_interval(0.0, 10.0, Z95).0, 0.0);
    }

    #[test]
    fn elo_from_even_and_lopsided_scores() {
        let even = elo(&[PairResult { a: "x".into(), b: "y".into(), score_a: 50.0, games: 100.0 }], "x").unwrap();
        assert!(even["y"].abs() < 1e-9);
        let r = elo(&[PairResult { a: "x".into(), b: "y".into(), score_a: 7500.0, games: 10_000.0 }], "y").unwrap();
        assert!((r["x"] - 400.0 * 3f64.log10()).abs() < 10.0);
        assert!((r["x"] - 190.84850188786498).abs() < 1e-6);
    }

    #[test]
    fn elo_recovers_a_three_player_chain() {
        let truth = [("a", 0.0), ("b", 150.0), ("c", -80.0)];
        let mut results = Vec::new();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let e = expected_score(truth[i].1, truth[j].1);
                results.push(PairResult { a: truth[i].0.into(), b: truth[j].0.into(), score_a: 1000.0 * e, games: 1000.0 });
            }
        }
        let r = elo(&results, "a").unwrap();
        for (name, rating) in truth {
            assert!((r[name] - rating).abs() < 1e-6, "{name}: {}", r[name]);
        }
        // gauge: shifting every rating leaves predictions unchanged
        let shifted: Vec<f64> = truth.iter().map(|(_, x)| x + 321.0).collect();
        assert!((expected_score(shifted[1], shifted[2]) - expected_score(truth[1].1, truth[2].1)).abs() < 1e-12);
    }

    #[test]
    fn elo_errors_and_clamps() {
        let split = [
            PairResult { a: "a".into(), b: "b".into(), score_a: 5.0, games: 10.0 },
            PairResult { a: "c".into(), b: "d".into(), score_a: 5.0, games: 10.0 },
        ];
        assert_eq!(elo(&split, "a"), Err(ArenaError::DisconnectedGraph));
        assert!(matches!(elo(&split, "z"), Err(ArenaError::UnknownAnchor(_))));
        let sweep = elo(&[PairResult { a: "a".into(), b: "b".into(), score_a: 10.0, games: 10.0 }], "a").unwrap();
        assert_eq!(sweep["b"], -ELO_CLAMP);
    }
}
