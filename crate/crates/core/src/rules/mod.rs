//! Xiangqi rules: board state, legal move generation, check and terminal
//! detection, perft.
//!
//! Rank 0 is Red's back rank. Positions are values; [`Position::apply_move`]
//! returns a new position.

mod movegen;
mod types;
mod zobrist;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use types::{Move, Outcome, Piece, PieceKind, Side, Square, FILES, NUM_SQUARES, RANKS};

pub type Board = [Option<Piece>; NUM_SQUARES];

pub const START_FEN: &str = "rnbakabnr/9/1c5c1/p1p1p1p1p/9/9/P1P1P1P1P/1C5C1/9/RNBAKABNR w";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RulesError {
    #[error("illegal move {0}")]
    IllegalMove(Move),
    #[error("invalid FEN: {0}")]
    Fen(String),
    #[error("invalid notation: {0}")]
    Notation(String),
}

/// Draw adjudication: a ply cap and threefold repetition of (board, side).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrawRules {
    pub draw_move_cap: u32,
    pub repetitions: usize,
}

impl Default for DrawRules {
    fn default() -> Self {
        DrawRules { draw_move_cap: 400, repetitions: 3 }
    }
}

impl DrawRules {
    pub fn with_cap(draw_move_cap: u32) -> Self {
        DrawRules { draw_move_cap, ..Default::default() }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Position {
    board: Board,
    side_to_move: Side,
    ply: u32,
    hash: u64,
    /// Hashes since the last capture, current position last.
    history: Vec<u64>,
}

impl Default for Position {
    fn default() -> Self {
        Position::startpos()
    }
}

impl Position {
    pub fn startpos() -> Position {
        Position::from_fen(START_FEN).expect("start FEN is valid")
    }

    /// Builds a position from a board and side to move with ply 0 and fresh history.
    pub fn from_board(board: Board, side_to_move: Side) -> Position {
        let hash = zobrist::full_hash(&board, side_to_move);
        Position { board, side_to_move, ply: 0, hash, history: vec![hash] }
    }

    pub fn from_pieces(pieces: &[(Square, Piece)], side_to_move: Side) -> Position {
        let mut board = [None; NUM_SQUARES];
        for &(sq, p) in pieces {
            board[sq.flat()] = Some(p);
        }
        Position::from_board(board, side_to_move)
    }

    pub fn from_fen(fen: &str) -> Result<Position, RulesError> {
        let mut parts = fen.split_whitespace();
        let placement = parts.next().ok_or_else(|| RulesError::Fen("empty".into()))?;
        let side = match parts.next() {
            None | Some("w") | Some("r") => Side::Red,
            Some("b") => Side::Black,
            Some(other) => return Err(RulesError::Fen(format!("bad side {other:?}"))),
        };
        let rows: Vec<&str> = placement.split('/').collect();
        if rows.len() != RANKS {
            return Err(RulesError::Fen(format!("expected 10 ranks, got {}", rows.len())));
        }
        let mut board = [None; NUM_SQUARES];
        for (i, row) in rows.iter().enumerate() {
            let rank = (RANKS - 1 - i) as u8;
            let mut file = 0u8;
            for c in row.chars() {
                if let Some(d) = c.to_digit(10) {
                    if d == 0 {
                        return Err(RulesError::Fen(format!("zero run in rank {rank}")));
                    }
                    file += d as u8;
                } else {
                    let piece = Piece::from_fen_char(c)
                        .ok_or_else(|| RulesError::Fen(format!("bad piece letter {c:?}")))?;
                    let sq = Square::new(file, rank)
                        .ok_or_else(|| RulesError::Fen(format!("rank {rank} overflows")))?;
                    board[sq.flat()] = Some(piece);
                    file += 1;
                }
                if file as usize > FILES {
                    return Err(RulesError::Fen(format!("rank {rank} overflows")));
                }
            }
            if file as usize != FILES {
                return Err(RulesError::Fen(format!("rank {rank} has {file} files")));
            }
        }
        let pos = Position::from_board(board, side);
        if let Err(e) = pos.validate() {
            return Err(RulesError::Fen(e));
        }
        Ok(pos)
    }

    pub fn to_fen(&self) -> String {
        let mut s = String::with_capacity(64);
        for rank in (0..RANKS as u8).rev() {
            let mut empty = 0;
            for file in 0..FILES as u8 {
                match self.board[Square::new(file, rank).unwrap().flat()] {
                    None => empty += 1,
                    Some(p) => {
                        if empty > 0 {
                            s.push(char::from_digit(empty, 10).unwrap());
                            empty = 0;
                        }
                        s.push(p.fen_char());
                    }
                }
            }
            if empty > 0 {
                s.push(char::from_digit(empty, 10).unwrap());
            }
            if rank > 0 {
                s.push('/');
            }
        }
        s.push_str(match self.side_to_move {
            Side::Red => " w",
            Side::Black => " b",
        });
        s
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let mut counts = [[0usize; PieceKind::COUNT]; 2];
        for sq in Square::all() {
            let Some(p) = self.board[sq.flat()] else { continue };
            counts[p.side.index()][p.kind.index()] += 1;
            match p.kind {
                PieceKind::General | PieceKind::Advisor if !p.side.in_palace(sq) => {
                    return Err(format!("{:?} {:?} outside palace at {sq}", p.side, p.kind));
                }
                PieceKind::Elephant if !p.side.owns_rank(sq.rank()) => {
                    return Err(format!("{:?} elephant across the river at {sq}", p.side));
                }
                _ => {}
            }
        }
        for side in Side::BOTH {
            for kind in PieceKind::ALL {
                let n = counts[side.index()][kind.index()];
                if n > kind.initial_count() {
                    return Err(format!("{side:?} has {n} of {kind:?}"));
                }
            }
            if counts[side.index()][PieceKind::General.index()] != 1 {
                return Err(format!("{side:?} must have exactly one general"));
            }
        }
        if generals_face(&self.board) {
            return Err("generals face each other".into());
        }
        Ok(())
    }

    #[inline]
    pub fn board(&self) -> &Board {
        &self.board
    }

    #[inline]
    pub fn piece_at(&self, sq: Square) -> Option<Piece> {
        self.board[sq.flat()]
    }

    #[inline]
    pub fn side_to_move(&self) -> Side {
        self.side_to_move
    }

    #[inline]
    pub fn ply(&self) -> u32 {
        self.ply
    }

    #[inline]
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn history(&self) -> &[u64] {
        &self.history
    }

    pub fn piece_count(&self) -> usize {
        self.board.iter().filter(|c| c.is_some()).count()
    }

    /// Squares holding `side`'s pieces, flat index ascending.
    pub fn pieces_of(&self, side: Side) -> impl Iterator<Item = (Square, Piece)> + '_ {
        Square::all().filter_map(move |sq| match self.board[sq.flat()] {
            Some(p) if p.side == side => Some((sq, p)),
            _ => None,
        })
    }

    /// Same board with the other side to move (ply and history reset).
    pub fn with_side_to_move(&self, side: Side) -> Position {
        Position::from_board(self.board, side)
    }

    pub fn with_ply(mut self, ply: u32) -> Position {
        self.ply = ply;
        self
    }

    /// Board rotated 180° with colours swapped; the side to move swaps too.
    pub fn mirrored(&self) -> Position {
        let mut board = [None; NUM_SQUARES];
        for sq in Square::all() {
            board[sq.rotate().flat()] =
                self.board[sq.flat()].map(|p| Piece::new(p.side.opponent(), p.kind));
        }
        Position::from_board(board, self.side_to_move.opponent())
    }

    pub fn legal_moves(&self) -> Vec<Move> {
        movegen::legal_moves_for(&self.board, self.side_to_move)
    }

    /// Legal moves `side` would have if it were to move on this board.
    pub fn legal_moves_for(&self, side: Side) -> Vec<Move> {
        movegen::legal_moves_for(&self.board, side)
    }

    /// Pseudo-legal moves (may leave the mover's General attacked).
    pub fn pseudo_moves_for(&self, side: Side) -> Vec<Move> {
        let mut out = Vec::new();
        movegen::pseudo_moves(&self.board, side, &mut out);
        out
    }

    pub fn is_legal(&self, m: Move) -> bool {
        match self.board[m.from.flat()] {
            Some(p) if p.side == self.side_to_move => {
                let mut out = Vec::with_capacity(17);
                movegen::piece_pseudo_moves(&self.board, m.from, p, &mut out);
                out.contains(&m) && {
                    let mut b = self.board;
                    movegen::make(&mut b, m);
                    !movegen::general_attacked(&b, self.side_to_move)
                }
            }
            _ => false,
        }
    }

    pub fn apply_move(&self, m: Move) -> Result<Position, RulesError> {
        if !self.is_legal(m) {
            return Err(RulesError::IllegalMove(m));
        }
        Ok(self.apply_unchecked(m))
    }

    /// Applies a move known to be legal.
    #[must_use]
    pub fn apply_unchecked(&self, m: Move) -> Position {
        let mut next = self.clone();
        let moving = next.board[m.from.flat()].expect("move from an empty square");
        let captured = movegen::make(&mut next.board, m);
        let mut h = self.hash ^ zobrist::side_key();
        h ^= zobrist::piece_key(m.from.flat(), moving) ^ zobrist::piece_key(m.to.flat(), moving);
        if let Some(c) = captured {
            h ^= zobrist::piece_key(m.to.flat(), c);
            next.history.clear();
        }
        next.hash = h;
        next.history.push(h);
        next.side_to_move = self.side_to_move.opponent();
        next.ply += 1;
        next
    }

    pub fn in_check(&self, side: Side) -> bool {
        movegen::general_attacked(&self.board, side)
    }

    pub fn is_capture(&self, m: Move) -> bool {
        self.board[m.to.flat()].is_some()
    }

    /// Terminal status under the default draw rules (400-ply cap, threefold repetition).
    pub fn terminal(&self) -> Option<Outcome> {
        self.terminal_with(&DrawRules::default())
    }

    /// A side with no legal moves loses (checkmate and stalemate alike).
    pub fn terminal_with(&self, rules: &DrawRules) -> Option<Outcome> {
        if self.legal_moves().is_empty() {
            return Some(Outcome::win_for(self.side_to_move.opponent()));
        }
        self.draw_adjudicated(rules).then_some(Outcome::Draw)
    }

    pub fn draw_adjudicated(&self, rules: &DrawRules) -> bool {
        if self.ply >= rules.draw_move_cap {
            return true;
        }
        let seen = self.history.iter().filter(|&&h| h == self.hash).count();
        seen >= rules.repetitions
    }

    pub fn perft(&self, depth: u32) -> u64 {
        let mut board = self.board;
        movegen::perft_board(&mut board, self.side_to_move, depth)
    }
}

fn generals_face(board: &Board) -> bool {
    let (Some(r), Some(b)) = (
        movegen::find_general(board, Side::Red),
        movegen::find_general(board, Side::Black),
    ) else {
        return false;
    };
    if r.file() != b.file() {
        return false;
    }
    ((r.rank() + 1)..b.rank()).all(|rank| board[Square::new(r.file(), rank).unwrap().flat()].is_none())
}

impl fmt::Debug for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Position({:?}, ply {})", self.to_fen(), self.ply)
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rank in (0..RANKS as u8).rev() {
            write!(f, "{rank} ")?;
            for file in 0..FILES as u8 {
                let c = self.board[Square::new(file, rank).unwrap().flat()].map_or('.', |p| p.fen_char());
                write!(f, "{c}")?;
            }
            writeln!(f)?;
        }
        writeln!(f, "  abcdefghi  {:?} to move", self.side_to_move)
    }
}
