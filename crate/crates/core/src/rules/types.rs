use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RulesError;

pub const FILES: usize = 9;
pub const RANKS: usize = 10;
pub const NUM_SQUARES: usize = FILES * RANKS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Red,
    Black,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Red, Side::Black];

    #[inline]
    pub fn opponent(self) -> Side {
        match self {
            Side::Red => Side::Black,
            Side::Black => Side::Red,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Rank direction in which this side's soldiers advance.
    #[inline]
    pub fn forward(self) -> i32 {
        match self {
            Side::Red => 1,
            Side::Black => -1,
        }
    }

    /// True if `rank` lies on this side's half of the river.
    #[inline]
    pub fn owns_rank(self, rank: u8) -> bool {
        match self {
            Side::Red => rank <= 4,
            Side::Black => rank >= 5,
        }
    }

    #[inline]
    pub fn in_palace(self, sq: Square) -> bool {
        let (f, r) = (sq.file(), sq.rank());
        (3..=5).contains(&f)
            && match self {
                Side::Red => r <= 2,
                Side::Black => r >= 7,
            }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PieceKind {
    General,
    Advisor,
    Elephant,
    Horse,
    Chariot,
    Cannon,
    Soldier,
}

impl PieceKind {
    pub const COUNT: usize = 7;
    pub const ALL: [PieceKind; 7] = [
        PieceKind::General,
        PieceKind::Advisor,
        PieceKind::Elephant,
        PieceKind::Horse,
        PieceKind::Chariot,
        PieceKind::Cannon,
        PieceKind::Soldier,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of pieces of this kind each side starts with.
    pub fn initial_count(self) -> usize {
        match self {
            PieceKind::General => 1,
            PieceKind::Soldier => 5,
            _ => 2,
        }
    }

    /// Uppercase FEN letter.
    pub fn letter(self) -> char {
        match self {
            PieceKind::General => 'K',
            PieceKind::Advisor => 'A',
            PieceKind::Elephant => 'B',
            PieceKind::Horse => 'N',
            PieceKind::Chariot => 'R',
            PieceKind::Cannon => 'C',
            PieceKind::Soldier => 'P',
        }
    }

    pub fn from_letter(c: char) -> Option<PieceKind> {
        Some(match c.to_ascii_uppercase() {
            'K' => PieceKind::General,
            'A' => PieceKind::Advisor,
            'B' => PieceKind::Elephant,
            'N' => PieceKind::Horse,
            'R' => PieceKind::Chariot,
            'C' => PieceKind::Cannon,
            'P' => PieceKind::Soldier,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Piece {
    pub side: Side,
    pub kind: PieceKind,
}

impl Piece {
    pub const fn new(side: Side, kind: PieceKind) -> Self {
        Piece { side, kind }
    }

    /// Index in 0..14, Red kinds first.
    #[inline]
    pub fn index(self) -> usize {
        self.side.index() * PieceKind::COUNT + self.kind.index()
    }

    pub fn fen_char(self) -> char {
        let c = self.kind.letter();
        match self.side {
            Side::Red => c,
            Side::Black => c.to_ascii_lowercase(),
        }
    }

    pub fn from_fen_char(c: char) -> Option<Piece> {
        let kind = PieceKind::from_letter(c)?;
        let side = if c.is_ascii_uppercase() { Side::Red } else { Side::Black };
        Some(Piece { side, kind })
    }
}

/// A board intersection; flat index is `rank * 9 + file`, rank 0 being Red's back rank.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub struct Square(u8);

impl Square {
    pub fn new(file: u8, rank: u8) -> Option<Square> {
        if (file as usize) < FILES && (rank as usize) < RANKS {
            Some(Square(rank * FILES as u8 + file))
        } else {
            None
        }
    }

    pub fn from_flat(flat: usize) -> Option<Square> {
        (flat < NUM_SQUARES).then_some(Square(flat as u8))
    }

    #[inline]
    pub(crate) const fn from_flat_unchecked(flat: u8) -> Square {
        Square(flat)
    }

    #[inline]
    pub fn flat(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn file(self) -> u8 {
        self.0 % FILES as u8
    }

    #[inline]
    pub fn rank(self) -> u8 {
        self.0 / FILES as u8
    }

    /// The square reached after a half-turn of the board.
    #[inline]
    pub fn rotate(self) -> Square {
        Square((NUM_SQUARES - 1) as u8 - self.0)
    }

    #[inline]
    pub fn offset(self, d_rank: i32, d_file: i32) -> Option<Square> {
        let r = self.rank() as i32 + d_rank;
        let f = self.file() as i32 + d_file;
        if (0..RANKS as i32).contains(&r) && (0..FILES as i32).contains(&f) {
            Some(Square((r * FILES as i32 + f) as u8))
        } else {
            None
        }
    }

    pub fn all() -> impl Iterator<Item = Square> {
        (0..NUM_SQUARES as u8).map(Square)
    }
}

impl From<Square> for u8 {
    fn from(s: Square) -> u8 {
        s.0
    }
}

impl TryFrom<u8> for Square {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Square::from_flat(v as usize).ok_or_else(|| format!("square index {v} out of range"))
    }
}

impl fmt::Debug for Square {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Square {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", (b'a' + self.file()) as char, self.rank())
    }
}

impl FromStr for Square {
    type Err = RulesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 2 {
            return Err(RulesError::Notation(format!("bad square {s:?}")));
        }
        let (f, r) = (b[0], b[1]);
        if !(b'a'..=b'i').contains(&f) || !r.is_ascii_digit() {
            return Err(RulesError::Notation(format!("bad square {s:?}")));
        }
        Ok(Square::new(f - b'a', r - b'0').expect("checked range"))
    }
}

/// Origin/destination pair. Parses from and prints as ICCS coordinates, e.g. `h2e2`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Move {
    pub from: Square,
    pub to: Square,
}

impl Move {
    pub fn new(from: Square, to: Square) -> Move {
        Move { from, to }
    }

    pub fn rotate(self) -> Move {
        Move::new(self.from.rotate(), self.to.rotate())
    }
}

impl fmt::Debug for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.from, self.to)
    }
}

impl FromStr for Move {
    type Err = RulesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 4 || !s.is_ascii() {
            return Err(RulesError::Notation(format!("bad ICCS move {s:?}")));
        }
        let from: Square = s[..2]
            .parse()
            .map_err(|_| RulesError::Notation(format!("bad ICCS move {s:?}")))?;
        let to: Square = s[2..]
            .parse()
            .map_err(|_| RulesError::Notation(format!("bad ICCS move {s:?}")))?;
        if from == to {
            return Err(RulesError::Notation(format!("null move {s:?}")));
        }
        Ok(Move { from, to })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    RedWins,
    BlackWins,
    Draw,
}

impl Outcome {
    pub fn win_for(side: Side) -> Outcome {
        match side {
            Side::Red => Outcome::RedWins,
            Side::Black => Outcome::BlackWins,
        }
    }

    /// +1 win, 0 draw, -1 loss from `side`'s perspective.
    pub fn score_for(self, side: Side) -> f64 {
        match (self, side) {
            (Outcome::Draw, _) => 0.0,
            (Outcome::RedWins, Side::Red) | (Outcome::BlackWins, Side::Black) => 1.0,
            _ => -1.0,
        }
    }

    pub fn result_token(self) -> &'static str {
        match self {
            Outcome::RedWins => "1-0",
            Outcome::BlackWins => "0-1",
            Outcome::Draw => "1/2-1/2",
        }
    }

    pub fn from_result_token(tok: &str) -> Option<Outcome> {
        match tok {
            "1-0" => Some(Outcome::RedWins),
            "0-1" => Some(Outcome::BlackWins),
            "1/2-1/2" => Some(Outcome::Draw),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_flat_bijection() {
        for flat in 0..NUM_SQUARES {
            let sq = Square::from_flat(flat).unwrap();
            assert_eq!(Square::new(sq.file(), sq.rank()), Some(sq));
            assert_eq!(sq.rotate().rotate(), sq);
        }
        assert!(Square::from_flat(90).is_none());
        assert!(Square::new(9, 0).is_none());
        assert!(Square::new(0, 10).is_none());
    }

    #[test]
    fn iccs_round_trip() {
        let m: Move = "h2e2".parse().unwrap();
        assert_eq!(m.from, Square::new(7, 2).unwrap());
        assert_eq!(m.to, Square::new(4, 2).unwrap());
        assert_eq!(m.to_string(), "h2e2");
        assert!("z9a0".parse::<Move>().is_err());
        assert!("a0a0".parse::<Move>().is_err());
        assert!("a0a".parse::<Move>().is_err());
    }

    #[test]
    fn piece_letters() {
        for kind in PieceKind::ALL {
            for side in Side::BOTH {
                let p = Piece::new(side, kind);
                assert_eq!(Piece::from_fen_char(p.fen_char()), Some(p));
            }
        }
    }
}
