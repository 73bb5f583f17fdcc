use super::types::{Move, Piece, PieceKind, Side, Square, NUM_SQUARES};
use super::Board;

const ORTHO: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const DIAG: [(i32, i32); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
/// Horse jumps as (d_rank, d_file, leg_rank, leg_file).
const HORSE: [(i32, i32, i32, i32); 8] = [
    (2, 1, 1, 0),
    (2, -1, 1, 0),
    (-2, 1, -1, 0),
    (-2, -1, -1, 0),
    (1, 2, 0, 1),
    (-1, 2, 0, 1),
    (1, -2, 0, -1),
    (-1, -2, 0, -1),
];

#[inline]
fn can_land(board: &Board, side: Side, to: Square) -> bool {
    match board[to.flat()] {
        None => true,
        Some(p) => p.side != side,
    }
}

/// Appends every geometrically valid move of the piece on `from`, ignoring
/// whether it leaves the mover's General attacked.
pub(crate) fn piece_pseudo_moves(board: &Board, from: Square, piece: Piece, out: &mut Vec<Move>) {
    let side = piece.side;
    match piece.kind {
        PieceKind::General => {
            for (dr, df) in ORTHO {
                if let Some(to) = from.offset(dr, df) {
                    if side.in_palace(to) && can_land(board, side, to) {
                        out.push(Move::new(from, to));
                    }
                }
            }
        }
        PieceKind::Advisor => {
            for (dr, df) in DIAG {
                if let Some(to) = from.offset(dr, df) {
                    if side.in_palace(to) && can_land(board, side, to) {
                        out.push(Move::new(from, to));
                    }
                }
            }
        }
        PieceKind::Elephant => {
            for (dr, df) in DIAG {
                let (Some(eye), Some(to)) = (from.offset(dr, df), from.offset(2 * dr, 2 * df)) else {
                    continue;
                };
                if side.owns_rank(to.rank()) && board[eye.flat()].is_none() && can_land(board, side, to) {
                    out.push(Move::new(from, to));
                }
            }
        }
        PieceKind::Horse => {
            for (dr, df, lr, lf) in HORSE {
                let (Some(leg), Some(to)) = (from.offset(lr, lf), from.offset(dr, df)) else {
                    continue;
                };
                if board[leg.flat()].is_none() && can_land(board, side, to) {
                    out.push(Move::new(from, to));
                }
            }
        }
        PieceKind::Chariot => {
            for (dr, df) in ORTHO {
                let mut cur = from;
                while let Some(to) = cur.offset(dr, df) {
                    match board[to.flat()] {
                        None => out.push(Move::new(from, to)),
                        Some(p) => {
                            if p.side != side {
                                out.push(Move::new(from, to));
                            }
                            break;
                        }
                    }
                    cur = to;
                }
            }
        }
        PieceKind::Cannon => {
            for (dr, df) in ORTHO {
                let mut cur = from;
                let mut screened = false;
                while let Some(to) = cur.offset(dr, df) {
                    match (board[to.flat()], screened) {
                        (None, false) => out.push(Move::new(from, to)),
                        (None, true) => {}
                        (Some(_), false) => screened = true,
                        (Some(p), true) => {
                            if p.side != side {
                                out.push(Move::new(from, to));
                            }
                            break;
                        }
                    }
                    cur = to;
                }
            }
        }
        PieceKind::Soldier => {
            let fwd = side.forward();
            if let Some(to) = from.offset(fwd, 0) {
                if can_land(board, side, to) {
                    out.push(Move::new(from, to));
                }
            }
            if !side.owns_rank(from.rank()) {
                for df in [-1, 1] {
                    if let Some(to) = from.offset(0, df) {
                        if can_land(board, side, to) {
                            out.push(Move::new(from, to));
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn pseudo_moves(board: &Board, side: Side, out: &mut Vec<Move>) {
    for flat in 0..NUM_SQUARES {
        if let Some(p) = board[flat] {
            if p.side == side {
                piece_pseudo_moves(board, Square::from_flat_unchecked(flat as u8), p, out);
            }
        }
    }
}

pub(crate) fn find_general(board: &Board, side: Side) -> Option<Square> {
    let g = Some(Piece::new(side, PieceKind::General));
    // Generals never leave their palace, so only those 9 squares need scanning.
    let ranks = match side {
        Side::Red => 0..3u8,
        Side::Black => 7..10u8,
    };
    for r in ranks {
        for f in 3..6u8 {
            let sq = Square::new(f, r).expect("palace square");
            if board[sq.flat()] == g {
                return Some(sq);
            }
        }
    }
    None
}

/// True if `side`'s General is attacked by an enemy piece or faces the enemy General.
pub(crate) fn general_attacked(board: &Board, side: Side) -> bool {
    let Some(g) = find_general(board, side) else {
        return false;
    };
    let enemy = side.opponent();

    // Lines: chariot on first hit, cannon on second hit, facing General on first hit of a file.
    for (dr, df) in ORTHO {
        let mut cur = g;
        let mut hits = 0;
        while let Some(sq) = cur.offset(dr, df) {
            if let Some(p) = board[sq.flat()] {
                hits += 1;
                if hits == 1 {
                    if p.side == enemy
                        && (p.kind == PieceKind::Chariot || (p.kind == PieceKind::General && df == 0))
                    {
                        return true;
                    }
                } else {
                    if p.side == enemy && p.kind == PieceKind::Cannon {
                        return true;
                    }
                    break;
                }
            }
            cur = sq;
        }
    }

    // A horse at g + (dr, df) moving onto g has its leg adjacent to itself, toward g.
    for (dr, df, lr, lf) in HORSE {
        let Some(h) = g.offset(dr, df) else { continue };
        if board[h.flat()] != Some(Piece::new(enemy, PieceKind::Horse)) {
            continue;
        }
        let Some(leg) = h.offset(-lr, -lf) else { continue };
        if board[leg.flat()].is_none() {
            return true;
        }
    }

    let soldier = Some(Piece::new(enemy, PieceKind::Soldier));
    if let Some(sq) = g.offset(-enemy.forward(), 0) {
        if board[sq.flat()] == soldier {
            return true;
        }
    }
    for df in [-1, 1] {
        if let Some(sq) = g.offset(0, df) {
            if board[sq.flat()] == soldier && !enemy.owns_rank(sq.rank()) {
                return true;
            }
        }
    }
    false
}

#[inline]
pub(crate) fn make(board: &mut Board, m: Move) -> Option<Piece> {
    let captured = board[m.to.flat()];
    board[m.to.flat()] = board[m.from.flat()];
    board[m.from.flat()] = None;
    captured
}

#[inline]
pub(crate) fn unmake(board: &mut Board, m: Move, captured: Option<Piece>) {
    board[m.from.flat()] = board[m.to.flat()];
    board[m.to.flat()] = captured;
}

/// Legal moves for `side` on `board`, sorted by (from, to) flat index.
pub(crate) fn legal_moves_for(board: &Board, side: Side) -> Vec<Move> {
    let mut pseudo = Vec::with_capacity(64);
    pseudo_moves(board, side, &mut pseudo);
    let mut scratch = *board;
    pseudo.retain(|&m| {
        let cap = make(&mut scratch, m);
        let ok = !general_attacked(&scratch, side);
        unmake(&mut scratch, m, cap);
        ok
    });
    // pseudo_moves walks `from` ascending; destinations need sorting within each piece.
    pseudo.sort_unstable();
    pseudo
}

pub(crate) fn perft_board(board: &mut Board, side: Side, depth: u32) -> u64 {
    if depth == 0 {
        return 1;
    }
    let moves = legal_moves_for(board, side);
    if depth == 1 {
        return moves.len() as u64;
    }
    let mut total = 0;
    for m in moves {
        let cap = make(board, m);
        total += perft_board(board, side.opponent(), depth - 1);
        unmake(board, m, cap);
    }
    total
}
