use super::types::{Piece, Side, NUM_SQUARES};
use super::Board;

const SEED: u64 = 0x5851_f42d_4c95_7f2d;

const fn splitmix64(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (state, z ^ (z >> 31))
}

const fn build_table() -> ([[u64; 14]; NUM_SQUARES], u64) {
    let mut table = [[0u64; 14]; NUM_SQUARES];
    let mut state = SEED;
    let mut sq = 0;
    while sq < NUM_SQUARES {
        let mut p = 0;
        while p < 14 {
            let (s, v) = splitmix64(state);
            state = s;
            table[sq][p] = v;
            p += 1;
        }
        sq += 1;
    }
    let (_, side) = splitmix64(state);
    (table, side)
}

const TABLES: ([[u64; 14]; NUM_SQUARES], u64) = build_table();

#[inline]
pub(crate) fn piece_key(sq: usize, piece: Piece) -> u64 {
    TABLES.0[sq][piece.index()]
}

/// Xored in when Black is to move.
#[inline]
pub(crate) fn side_key() -> u64 {
    TABLES.1
}

pub(crate) fn full_hash(board: &Board, side: Side) -> u64 {
    let mut h = 0;
    for (sq, cell) in board.iter().enumerate() {
        if let Some(p) = cell {
            h ^= piece_key(sq, *p);
        }
    }
    if side == Side::Black {
        h ^= side_key();
    }
    h
}
