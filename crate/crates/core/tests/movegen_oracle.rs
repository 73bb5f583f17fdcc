//! Cross-checks the move generator against a brute-force enumerator that tests
//! every (from, to) pair with direct geometric predicates.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xq_core::rules::{Board, Move, Piece, PieceKind, Position, Side, Square, NUM_SQUARES};

fn between(board: &Board, a: Square, b: Square) -> Option<usize> {
    let (ar, af, br, bf) = (a.rank() as i32, a.file() as i32, b.rank() as i32, b.file() as i32);
    if ar != br && af != bf {
        return None;
    }
    let (dr, df) = ((br - ar).signum(), (bf - af).signum());
    let mut n = 0;
    let (mut r, mut f) = (ar + dr, af + df);
    while (r, f) != (br, bf) {
        if board[(r * 9 + f) as usize].is_some() {
            n += 1;
        }
        r += dr;
        f += df;
    }
    Some(n)
}

fn in_palace(side: Side, sq: Square) -> bool {
    (3..=5).contains(&sq.file())
        && match side {
            Side::Red => sq.rank() <= 2,
            Side::Black => sq.rank() >= 7,
        }
}

fn own_half(side: Side, rank: u8) -> bool {
    match side {
        Side::Red => rank <= 4,
        Side::Black => rank >= 5,
    }
}

fn oracle_pseudo(board: &Board, from: Square, to: Square) -> bool {
    let Some(p) = board[from.flat()] else { return false };
    if from == to {
        return false;
    }
    if let Some(t) = board[to.flat()] {
        if t.side == p.side {
            return false;
        }
    }
    let dr = to.rank() as i32 - from.rank() as i32;
    let df = to.file() as i32 - from.file() as i32;
    let sq = |r: i32, f: i32| board[(r * 9 + f) as usize];
    let (fr, ff) = (from.rank() as i32, from.file() as i32);
    match p.kind {
        PieceKind::General => dr.abs() + df.abs() == 1 && in_palace(p.side, to),
        PieceKind::Advisor => dr.abs() == 1 && df.abs() == 1 && in_palace(p.side, to),
        PieceKind::Elephant => {
            dr.abs() == 2 && df.abs() == 2 && own_half(p.side, to.rank()) && sq(fr + dr / 2, ff + df / 2).is_none()
        }
        PieceKind::Horse => {
            let shape = (dr.abs() == 2 && df.abs() == 1) || (dr.abs() == 1 && df.abs() == 2);
            let (lr, lf) = if dr.abs() == 2 { (dr / 2, 0) } else { (0, df / 2) };
            shape && sq(fr + lr, ff + lf).is_none()
        }
        PieceKind::Chariot => between(board, from, to) == Some(0),
        PieceKind::Cannon => match board[to.flat()] {
            None => between(board, from, to) == Some(0),
            Some(_) => between(board, from, to) == Some(1),
        },
        PieceKind::Soldier => {
            let fwd = if p.side == Side::Red { 1 } else { -1 };
            (dr == fwd && df == 0) || (dr == 0 && df.abs() == 1 && !own_half(p.side, from.rank()))
        }
    }
}

fn general_square(board: &Board, side: Side) -> Option<Square> {
    Square::all().find(|s| board[s.flat()] == Some(Piece::new(side, PieceKind::General)))
}

fn oracle_attacked(board: &Board, side: Side) -> bool {
    let Some(g) = general_square(board, side) else { return false };
    let Some(eg) = general_square(board, side.opponent()) else { return false };
    if g.file() == eg.file() && between(board, g, eg) == Some(0) {
        return true;
    }
    Square::all().any(|s| matches!(board[s.flat()], Some(p) if p.side != side) && oracle_pseudo(board, s, g))
}

fn oracle_legal(board: &Board, side: Side) -> Vec<Move> {
    let mut out = Vec::new();
    for from in Square::all() {
        if !matches!(board[from.flat()], Some(p) if p.side == side) {
            continue;
        }
        for to in Square::all() {
            if !oracle_pseudo(board, from, to) {
                continue;
            }
            let mut b = *board;
            b[to.flat()] = b[from.flat()];
            b[from.flat()] = None;
            if !oracle_attacked(&b, side) {
                out.push(Move::new(from, to));
            }
        }
    }
    out
}

fn oracle_perft(board: &Board, side: Side, depth: u32) -> u64 {
    if depth == 0 {
        return 1;
    }
    let moves = oracle_legal(board, side);
    moves
        .iter()
        .map(|m| {
            let mut b = *board;
            b[m.to.flat()] = b[m.from.flat()];
            b[m.from.flat()] = None;
            oracle_perft(&b, side.opponent(), depth - 1)
        })
        .sum()
}

/// Random playout positions, stopped before the game ends.
fn random_positions(seed: u64, count: usize, max_plies: usize) -> Vec<Position> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = Position::startpos();
        let stop = rand::Rng::gen_range(&mut rng, 0..max_plies);
        for _ in 0..stop {
            let moves = p.legal_moves();
            let Some(m) = moves.choose(&mut rng) else { break };
            p = p.apply_unchecked(*m);
        }
        out.push(p);
    }
    out
}

#[test]
fn oracle_perft_matches_start_position() {
    let p = Position::startpos();
    let expected = [1u64, 44, 1_920, 79_666];
    for (depth, &want) in expected.iter().enumerate() {
        assert_eq!(oracle_perft(p.board(), Side::Red, depth as u32), want, "oracle depth {depth}");
        assert_eq!(p.perft(depth as u32), want, "engine depth {depth}");
    }
}

#[test]
fn legal_moves_match_oracle_on_random_positions() {
    for p in random_positions(7, 400, 160) {
        let side = p.side_to_move();
        assert_eq!(p.legal_moves(), oracle_legal(p.board(), side), "{}", p.to_fen());
        assert_eq!(p.in_check(side), oracle_attacked(p.board(), side), "{}", p.to_fen());
        // The opponent's view must agree too (used by the encoder's enemy planes).
        assert_eq!(p.legal_moves_for(side.opponent()), oracle_legal(p.board(), side.opponent()));
    }
}

#[test]
fn perft_recursive_consistency() {
    for p in random_positions(11, 12, 120) {
        for depth in 1..=3 {
            let sum: u64 = p.legal_moves().iter().map(|&m| p.apply_unchecked(m).perft(depth - 1)).sum();
            assert_eq!(p.perft(depth), sum);
        }
        assert_eq!(p.perft(2), oracle_perft(p.board(), p.side_to_move(), 2));
    }
}

#[test]
fn hash_has_no_collisions_on_random_positions() {
    use std::collections::HashMap;
    let mut seen: HashMap<u64, ([Option<Piece>; NUM_SQUARES], Side)> = HashMap::new();
    let mut distinct = 0;
    for p in random_positions(3, 10_000, 200) {
        let key = (*p.board(), p.side_to_move());
        match seen.get(&p.hash()) {
            Some(prev) => assert_eq!(prev, &key, "hash collision between distinct positions"),
            None => {
                seen.insert(p.hash(), key);
                distinct += 1;
            }
        }
    }
    assert!(distinct > 5_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_legal_move_yields_a_valid_position(seed in any::<u64>()) {
        for p in random_positions(seed, 3, 150) {
            for m in p.legal_moves() {
                let q = p.apply_move(m).unwrap();
                prop_assert!(q.validate().is_ok(), "{} after {}", p.to_fen(), m);
                prop_assert!(!q.in_check(p.side_to_move()));
                prop_assert_eq!(q.piece_count() + usize::from(p.is_capture(m)), p.piece_count());
            }
        }
    }

    #[test]
    fn fen_round_trip_preserves_moves(seed in any::<u64>()) {
        for p in random_positions(seed, 2, 200) {
            let q = Position::from_fen(&p.to_fen()).unwrap();
            prop_assert_eq!(q.board(), p.board());
            prop_assert_eq!(q.legal_moves(), p.legal_moves());
            prop_assert_eq!(q.hash(), p.hash());
        }
    }
}
