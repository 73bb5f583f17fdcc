//! Position → observation tensors and move ↔ action-index mapping.
//!
//! Observations are mover-relative: when Black is to move the board is rotated
//! 180° and colours swapped, so the side to move always plays toward rank 9.
//! The network's action space uses the same frame; [`canonical_index`] and
//! [`from_canonical_index`] convert between it and absolute indices.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{Move, PieceKind, Position, Side, Square, FILES, NUM_SQUARES, RANKS};

pub const NUM_ACTIONS: usize = NUM_SQUARES * NUM_SQUARES;
pub const BOARD_PLANES: usize = 2 * PieceKind::COUNT;
pub const MAX_PIECE_SLOTS: usize = 16;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("action index {0} out of range")]
    Range(usize),
    #[error("move {0} is not legal here")]
    IllegalMove(Move),
    #[error("piece slot {0} is empty")]
    EmptySlot(usize),
    #[error("malformed observation dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum FeatureVariant {
    BoardOnly,
    BoardAlly,
    #[default]
    BoardAllyEnemy,
}

impl FeatureVariant {
    pub fn planes(self) -> usize {
        match self {
            FeatureVariant::BoardOnly => 14,
            FeatureVariant::BoardAlly => 21,
            FeatureVariant::BoardAllyEnemy => 28,
        }
    }
}

/// A `10 × 9 × P` tensor of 0/1 values, stored `[rank][file][plane]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    planes: usize,
    data: Vec<f32>,
}

impl Observation {
    pub fn zeros(planes: usize) -> Self {
        Observation { planes, data: vec![0.0; NUM_SQUARES * planes] }
    }

    pub fn from_data(planes: usize, data: Vec<f32>) -> Result<Self, EncodingError> {
        if data.len() != NUM_SQUARES * planes {
            return Err(EncodingError::Format(format!("{} values for {planes} planes", data.len())));
        }
        Ok(Observation { planes, data })
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, rank: usize, file: usize, plane: usize) -> f32 {
        self.data[(rank * FILES + file) * self.planes + plane]
    }

    #[inline]
    fn set(&mut self, sq: Square, plane: usize) {
        self.data[sq.flat() * self.planes + plane] = 1.0;
    }

    /// Sum of one plane.
    pub fn plane_sum(&self, plane: usize) -> f32 {
        (0..NUM_SQUARES).map(|c| self.data[c * self.planes + plane]).sum()
    }

    /// Writes `{H, W, P}` as little-endian u32 followed by the planes one
    /// after another, each row-major, as little-endian f32.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in [RANKS as u32, FILES as u32, self.planes as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for plane in 0..self.planes {
            for cell in 0..NUM_SQUARES {
                w.write_all(&self.data[cell * self.planes + plane].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Observation, EncodingError> {
        let mut word = [0u8; 4];
        let mut header = [0u32; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        if header[0] as usize != RANKS || header[1] as usize != FILES {
            return Err(EncodingError::Format(format!("unexpected board size {}x{}", header[0], header[1])));
        }
        let planes = header[2] as usize;
        if planes == 0 || planes > 64 {
            return Err(EncodingError::Format(format!("bad plane count {planes}")));
        }
        let mut obs = Observation::zeros(planes);
        for plane in 0..planes {
            for cell in 0..NUM_SQUARES {
                r.read_exact(&mut word)?;
                obs.data[cell * planes + plane] = f32::from_le_bytes(word);
            }
        }
        Ok(obs)
    }
}

#[inline]
pub fn canonical_square(sq: Square, mover: Side) -> Square {
    match mover {
        Side::Red => sq,
        Side::Black => sq.rotate(),
    }
}

pub fn encode(p: &Position, variant: FeatureVariant) -> Observation {
    let mover = p.side_to_move();
    let mut obs = Observation::zeros(variant.planes());
    for sq in Square::all() {
        if let Some(piece) = p.piece_at(sq) {
            let base = if piece.side == mover { 0 } else { PieceKind::COUNT };
            obs.set(canonical_square(sq, mover), base + piece.kind.index());
        }
    }
    if variant != FeatureVariant::BoardOnly {
        reach_planes(p, mover, mover, BOARD_PLANES, &mut obs);
    }
    if variant == FeatureVariant::BoardAllyEnemy {
        reach_planes(p, mover.opponent(), mover, BOARD_PLANES + PieceKind::COUNT, &mut obs);
    }
    obs
}

/// Marks every destination `side` could reach in one legal move, per moving kind.
fn reach_planes(p: &Position, side: Side, frame: Side, base: usize, obs: &mut Observation) {
    for m in p.legal_moves_for(side) {
        let kind = p.piece_at(m.from).expect("move from occupied square").kind;
        obs.set(canonical_square(m.to, frame), base + kind.index());
    }
}

#[inline]
pub fn move_to_index(m: Move) -> usize {
    m.from.flat() * NUM_SQUARES + m.to.flat()
}

/// Inverse of [`move_to_index`]. Indices with `from == to` decode to a null
/// move that is never legal.
pub fn index_to_move(i: usize) -> Result<Move, EncodingError> {
    if i >= NUM_ACTIONS {
        return Err(EncodingError::Range(i));
    }
    let from = Square::from_flat(i / NUM_SQUARES).expect("in range");
    let to = Square::from_flat(i % NUM_SQUARES).expect("in range");
    Ok(Move::new(from, to))
}

/// Action index of `m` in the network's mover-relative frame.
#[inline]
pub fn canonical_index(m: Move, mover: Side) -> usize {
    match mover {
        Side::Red => move_to_index(m),
        Side::Black => move_to_index(m.rotate()),
    }
}

pub fn from_canonical_index(i: usize, mover: Side) -> Result<Move, EncodingError> {
    let m = index_to_move(i)?;
    Ok(match mover {
        Side::Red => m,
        Side::Black => m.rotate(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LegalityMask {
    bits: Vec<bool>,
}

impl LegalityMask {
    pub fn empty() -> Self {
        LegalityMask { bits: vec![false; NUM_ACTIONS] }
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = LegalityMask::empty();
        for i in indices {
            mask.bits[i] = true;
        }
        mask
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn legal_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
    }
}

/// Mask over absolute action indices.
pub fn legality_mask(p: &Position) -> LegalityMask {
    LegalityMask::from_indices(p.legal_moves().into_iter().map(move_to_index))
}

/// Mask in the mover-relative frame the network sees.
pub fn canonical_mask(p: &Position) -> LegalityMask {
    let mover = p.side_to_move();
    LegalityMask::from_indices(p.legal_moves().into_iter().map(|m| canonical_index(m, mover)))
}

/// Softmax restricted to `mask`; masked-out entries are exactly 0.
/// Returns all zeros when nothing is legal.
pub fn masked_softmax(logits: &[f32], mask: &LegalityMask) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    let max = mask
        .legal_indices()
        .map(|i| logits[i])
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return out;
    }
    let mut total = 0.0f64;
    for i in mask.legal_indices() {
        let e = ((logits[i] - max) as f64).exp();
        out[i] = e as f32;
        total += e;
    }
    for i in mask.legal_indices() {
        out[i] = (out[i] as f64 / total) as f32;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorizedAction {
    /// Index of the moving piece among the mover's pieces in ascending square order.
    pub piece_slot: u8,
    pub destination: Square,
}

pub fn factorize(m: Move, p: &Position) -> Result<FactorizedAction, EncodingError> {
    if !p.is_legal(m) {
        return Err(EncodingError::IllegalMove(m));
    }
    let slot = p
        .pieces_of(p.side_to_move())
        .position(|(sq, _)| sq == m.from)
        .expect("legal move starts on a mover piece");
    Ok(FactorizedAction { piece_slot: slot as u8, destination: m.to })
}

pub fn defactorize(a: FactorizedAction, p: &Position) -> Result<Move, EncodingError> {
    let (from, _) = p
        .pieces_of(p.side_to_move())
        .nth(a.piece_slot as usize)
        .ok_or(EncodingError::EmptySlot(a.piece_slot as usize))?;
    let m = Move::new(from, a.destination);
    if p.is_legal(m) {
        Ok(m)
    } else {
        Err(EncodingError::IllegalMove(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::Piece;

    #[test]
    fn plane_counts() {
        let p = Position::startpos();
        for v in [FeatureVariant::BoardOnly, FeatureVariant::BoardAlly, FeatureVariant::BoardAllyEnemy] {
            assert_eq!(encode(&p, v).planes(), v.planes());
        }
    }

    #[test]
    fn initial_soldier_plane() {
        let obs = encode(&Position::startpos(), FeatureVariant::BoardOnly);
        assert_eq!(obs.plane_sum(PieceKind::Soldier.index()), 5.0);
        assert_eq!(obs.plane_sum(PieceKind::COUNT + PieceKind::Soldier.index()), 5.0);
        assert_eq!(obs.get(3, 0, PieceKind::Soldier.index()), 1.0);
    }

    #[test]
    fn ally_planes_count_kind_destination_pairs() {
        let p = Position::startpos();
        let obs = encode(&p, FeatureVariant::BoardAlly);
        let mut pairs = std::collections::HashSet::new();
        for m in p.legal_moves() {
            pairs.insert((p.piece_at(m.from).unwrap().kind, m.to));
        }
        let ones: f32 = (14..21).map(|k| obs.plane_sum(k)).sum();
        assert_eq!(ones as usize, pairs.len());
    }

    #[test]
    fn black_view_is_rotated_red_view() {
        let p = Position::startpos().apply_move("h2e2".parse().unwrap()).unwrap();
        let black = encode(&p, FeatureVariant::BoardAllyEnemy);
        let red = encode(&p.mirrored(), FeatureVariant::BoardAllyEnemy);
        assert_eq!(black, red);
    }

    #[test]
    fn index_definition() {
        let m = Move::new(Square::from_flat(0).unwrap(), Square::from_flat(1).unwrap());
        assert_eq!(move_to_index(m), 1);
        let null = index_to_move(8099).unwrap();
        assert_eq!(null.from, null.to);
        assert!(matches!(index_to_move(8100), Err(EncodingError::Range(8100))));
        assert!(!legality_mask(&Position::startpos()).get(8099));
    }

    #[test]
    fn mask_matches_moves() {
        let p = Position::startpos();
        let a = legality_mask(&p);
        assert_eq!(a.popcount(), 44);
        assert_eq!(a, legality_mask(&p));
        assert_eq!(canonical_mask(&p), a);
    }

    #[test]
    fn factorized_slots() {
        let p = Position::startpos();
        let first = p.legal_moves().into_iter().find(|m| m.from.flat() == 0).unwrap();
        assert_eq!(factorize(first, &p).unwrap().piece_slot, 0);
        let last_sq = p.pieces_of(Side::Red).last().unwrap().0;
        let last = p.legal_moves().into_iter().find(|m| m.from == last_sq).unwrap();
        assert_eq!(factorize(last, &p).unwrap().piece_slot, 15);

        let lone = Position::from_pieces(
            &[
                ("e1".parse().unwrap(), Piece::new(Side::Red, PieceKind::General)),
                ("d9".parse().unwrap(), Piece::new(Side::Black, PieceKind::General)),
            ],
            Side::Red,
        );
        for m in lone.legal_moves() {
            let f = factorize(m, &lone).unwrap();
            assert_eq!(f.piece_slot, 0);
            assert_eq!(defactorize(f, &lone).unwrap(), m);
        }
        assert!(factorize("a0a5".parse().unwrap(), &p).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let obs = encode(&Position::startpos(), FeatureVariant::BoardAllyEnemy);
        let mut buf = Vec::new();
        obs.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 4 * 90 * 28);
        assert_eq!(Observation::read_dump(&buf[..]).unwrap(), obs);
        assert!(Observation::read_dump(&buf[..20]).is_err());
    }

    #[test]
    fn masked_softmax_zero_outside_mask() {
        let mask = LegalityMask::from_indices([3, 10]);
        let mut logits = vec![5.0f32; NUM_ACTIONS];
        logits[3] = 1.0;
        logits[10] = 0.0;
        let p = masked_softmax(&logits, &mask);
        assert!((p[3] - 0.731_058_6).abs() < 1e-6);
        assert_eq!(p.iter().filter(|&&x| x != 0.0).count(), 2);
    }
}
