//! Negamax alpha-beta with a material + mobility evaluation.
//!
//! Only positions without legal moves are terminal inside the tree; repetition
//! and the move cap are left to the game driver so that the pruned search and
//! the plain negamax oracle see exactly the same tree.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{Move, PieceKind, Position, Side};

/// Magnitude of a mate score at the root; mates `n` plies away score `MATE - n`.
pub const MATE: i32 = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SearchError {
    #[error("position is terminal")]
    TerminalPosition,
    #[error("search depth must be at least 1")]
    ZeroDepth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalWeights {
    pub chariot: i32,
    pub cannon: i32,
    pub horse: i32,
    pub advisor: i32,
    pub elephant: i32,
    pub soldier: i32,
    /// Soldier value once it has crossed the river.
    pub soldier_crossed: i32,
    pub general: i32,
    /// Bonus per legal move.
    pub mobility: i32,
}

impl Default for EvalWeights {
    fn default() -> Self {
        EvalWeights {
            chariot: 900,
            cannon: 450,
            horse: 400,
            advisor: 200,
            elephant: 200,
            soldier: 100,
            soldier_crossed: 200,
            general: 0,
            mobility: 2,
        }
    }
}

impl EvalWeights {
    pub fn piece_value(&self, kind: PieceKind, crossed: bool) -> i32 {
        match kind {
            PieceKind::Chariot => self.chariot,
            PieceKind::Cannon => self.cannon,
            PieceKind::Horse => self.horse,
            PieceKind::Advisor => self.advisor,
            PieceKind::Elephant => self.elephant,
            PieceKind::Soldier if crossed => self.soldier_crossed,
            PieceKind::Soldier => self.soldier,
            PieceKind::General => self.general,
        }
    }

    pub fn material(&self, p: &Position, side: Side) -> i32 {
        p.pieces_of(side)
            .map(|(sq, piece)| self.piece_value(piece.kind, !side.owns_rank(sq.rank())))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub depth: u32,
    /// Stop expanding once this many nodes have been visited; the partial result is returned.
    pub node_budget: Option<u64>,
    /// Iterative deepening up to `depth`, keeping the deepest completed iteration.
    pub time_limit_ms: Option<u64>,
    pub weights: EvalWeights,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { depth: 3, node_budget: None, time_limit_ms: None, weights: EvalWeights::default() }
    }
}

impl SearchConfig {
    pub fn depth(depth: u32) -> Self {
        SearchConfig { depth, ..SearchConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub score: i32,
    pub best: Move,
    pub nodes: u64,
    /// Deepest fully searched depth.
    pub depth: u32,
}

/// Side-to-move score: material plus mobility, minus the same for the opponent.
pub fn evaluate(p: &Position, w: &EvalWeights) -> i32 {
    let me = p.side_to_move();
    let opp = me.opponent();
    evaluate_with_mobility(p, w, p.legal_moves().len(), p.legal_moves_for(opp).len())
}

fn evaluate_with_mobility(p: &Position, w: &EvalWeights, mine: usize, theirs: usize) -> i32 {
    let me = p.side_to_move();
    let material = w.material(p, me) - w.material(p, me.opponent());
    material + w.mobility * (mine as i32 - theirs as i32)
}

/// Captures first, most valuable victim then least valuable attacker, then action index.
pub fn order_moves(p: &Position, moves: &mut [Move]) {
    let w = EvalWeights::default();
    moves.sort_by_key(|m| match p.piece_at(m.to) {
        Some(victim) => {
            let attacker = p.piece_at(m.from).expect("move starts on a piece");
            (0, -w.piece_value(victim.kind, false), w.piece_value(attacker.kind, false), m.from.flat() * 90 + m.to.flat())
        }
        None => (1, 0, 0, m.from.flat() * 90 + m.to.flat()),
    });
}

struct Searcher<'a> {
    weights: &'a EvalWeights,
    nodes: u64,
    budget: Option<u64>,
    deadline: Option<Instant>,
    aborted: bool,
    prune: bool,
}

impl Searcher<'_> {
    fn out_of_resources(&mut self) -> bool {
        if self.aborted {
            return true;
        }
        if self.budget.is_some_and(|b| self.nodes >= b) {
            self.aborted = true;
        }
        if self.nodes % 1024 == 0 && self.deadline.is_some_and(|d| Instant::now() >= d) {
            self.aborted = true;
        }
        self.aborted
    }

    fn negamax(&mut self, p: &Position, depth: u32, mut alpha: i32, beta: i32, ply: i32) -> (i32, Option<Move>) {
        self.nodes += 1;
        let mut moves = p.legal_moves();
        if moves.is_empty() {
            return (-(MATE - ply), None);
        }
        if depth == 0 {
            let theirs = p.legal_moves_for(p.side_to_move().opponent()).len();
            return (evaluate_with_mobility(p, self.weights, moves.len(), theirs), None);
        }
        order_moves(p, &mut moves);
        let mut best = i32::MIN;
        let mut best_move = None;
        for m in moves {
            if best_move.is_some() && self.out_of_resources() {
                break;
            }
            let (s, _) = self.negamax(&p.apply_unchecked(m), depth - 1, -beta, -alpha, ply + 1);
            let s = -s;
            if s > best {
                best = s;
                best_move = Some(m);
            }
            if self.prune {
                alpha = alpha.max(s);
                if alpha >= beta {
                    break;
                }
            }
        }
        (best, best_move)
    }
}

fn run(p: &Position, cfg: &SearchConfig, prune: bool) -> Result<SearchResult, SearchError> {
    if cfg.depth == 0 {
        return Err(SearchError::ZeroDepth);
    }
    if p.legal_moves().is_empty() {
        return Err(SearchError::TerminalPosition);
    }
    let deadline = cfg.time_limit_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
    let mut s =
        Searcher { weights: &cfg.weights, nodes: 0, budget: cfg.node_budget, deadline, aborted: false, prune };
    let window = (-(MATE + 1), MATE + 1);
    if deadline.is_none() {
        let (score, best) = s.negamax(p, cfg.depth, window.0, window.1, 0);
        return Ok(SearchResult { score, best: best.expect("non-terminal root"), nodes: s.nodes, depth: cfg.depth });
    }
    let mut done: Option<SearchResult> = None;
    for d in 1..=cfg.depth {
        let (score, best) = s.negamax(p, d, window.0, window.1, 0);
        if s.aborted && done.is_some() {
            break;
        }
        done = Some(SearchResult { score, best: best.expect("non-terminal root"), nodes: s.nodes, depth: d });
        if s.aborted {
            break;
        }
    }
    let mut r = done.expect("depth 1 always recorded");
    r.nodes = s.nodes;
    Ok(r)
}

/// Alpha-beta negamax to `cfg.depth`.
pub fn search(p: &Position, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run(p, cfg, true)
}

/// Full-width negamax with the same move order; the reference for [`search`].
pub fn search_full_width(p: &Position, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run(p, cfg, false)
}
