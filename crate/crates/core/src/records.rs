//! Game records: a PGN subset with ICCS moves, cleaning, an indexed record
//! file, and position sampling along the game-length curve.
//!
//! A record file holds PGN documents separated by blank lines. The sidecar
//! `<file>.idx` stores, for every record, its byte offset and its ply count as
//! little-endian `u64` pairs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{DrawRules, Move, Outcome, Position};
use crate::search::{search, SearchConfig, SearchError};

/// Records shorter than this many rounds (Red move + Black move) are dropped.
pub const MIN_ROUNDS: usize = 10;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("illegal move {mv} at index {index}")]
    IllegalMove { index: usize, mv: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("position is terminal")]
    TerminalPosition,
    #[error("index error: {0}")]
    Index(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Termination {
    #[default]
    Normal,
    Disconnect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GameRecord {
    pub moves: Vec<Move>,
    pub result: Outcome,
    pub termination: Termination,
    /// Tags other than `Result` and `Termination`.
    pub metadata: BTreeMap<String, String>,
}

impl GameRecord {
    pub fn new(moves: Vec<Move>, result: Outcome) -> Self {
        GameRecord { moves, result, termination: Termination::Normal, metadata: BTreeMap::new() }
    }

    pub fn plies(&self) -> usize {
        self.moves.len()
    }

    /// Completed rounds; a trailing Red move does not count.
    pub fn rounds(&self) -> usize {
        self.moves.len() / 2
    }

    /// Positions before each move, starting from the initial position.
    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::with_capacity(self.moves.len());
        let mut p = Position::startpos();
        for &m in &self.moves {
            let next = p.apply_unchecked(m);
            out.push(p);
            p = next;
        }
        out
    }
}

fn parse_tag(line: &str) -> Result<(String, String), RecordError> {
    let inner = line
        .strip_prefix('[')
        .and_then(|l| l.strip_suffix(']'))
        .ok_or_else(|| RecordError::Parse(format!("malformed tag line {line:?}")))?;
    let (key, rest) = inner
        .trim()
        .split_once(char::is_whitespace)
        .ok_or_else(|| RecordError::Parse(format!("tag without value {line:?}")))?;
    let value = rest
        .trim()
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .ok_or_else(|| RecordError::Parse(format!("tag value must be quoted in {line:?}")))?;
    if key.is_empty() || value.contains('"') {
        return Err(RecordError::Parse(format!("malformed tag line {line:?}")));
    }
    Ok((key.to_string(), value.to_string()))
}

fn is_result_token(tok: &str) -> bool {
    Outcome::from_result_token(tok).is_some()
}

/// Parses one document and replays its moves from the initial position.
pub fn parse_record(text: &str) -> Result<GameRecord, RecordError> {
    let mut tags = BTreeMap::new();
    let mut tokens = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line.starts_with('[') {
            if !tokens.is_empty() {
                return Err(RecordError::Parse("tag after move text".into()));
            }
            let (k, v) = parse_tag(line)?;
            tags.insert(k, v);
        } else {
            tokens.extend(line.split_whitespace());
        }
    }
    let token_result = match tokens.last() {
        Some(t) if is_result_token(t) => {
            let r = Outcome::from_result_token(t);
            tokens.pop();
            r
        }
        _ => None,
    };
    let tag_result = match tags.remove("Result") {
        Some(v) => Some(Outcome::from_result_token(&v).ok_or_else(|| RecordError::Parse(format!("bad Result tag {v:?}")))?),
        None => None,
    };
    let result = match (tag_result, token_result) {
        (Some(a), Some(b)) if a != b => return Err(RecordError::Parse("Result tag disagrees with result token".into())),
        (Some(r), _) | (None, Some(r)) => r,
        (None, None) => return Err(RecordError::Parse("missing result".into())),
    };
    let termination = match tags.remove("Termination") {
        Some(v) if v.eq_ignore_ascii_case("disconnect") => Termination::Disconnect,
        Some(v) => {
            tags.insert("Termination".into(), v);
            Termination::Normal
        }
        None => Termination::Normal,
    };

    let mut moves = Vec::with_capacity(tokens.len());
    for tok in &tokens {
        if is_result_token(tok) {
            return Err(RecordError::Parse(format!("result token {tok:?} before the end")));
        }
        let m: Move = tok.parse().map_err(|_| RecordError::Parse(format!("bad move token {tok:?}")))?;
        moves.push(m);
    }
    let mut p = Position::startpos();
    for (index, &m) in moves.iter().enumerate() {
        p = p.apply_move(m).map_err(|_| RecordError::IllegalMove { index, mv: m.to_string() })?;
    }
    Ok(GameRecord { moves, result, termination, metadata: tags })
}

pub fn serialize_record(r: &GameRecord) -> String {
    let mut out = String::new();
    for (k, v) in &r.metadata {
        out.push_str(&format!("[{k} \"{v}\"]\n"));
    }
    out.push_str(&format!("[Result \"{}\"]\n", r.result.result_token()));
    if r.termination == Termination::Disconnect {
        out.push_str("[Termination \"disconnect\"]\n");
    }
    let mut line = String::new();
    for m in &r.moves {
        let s = m.to_string();
        if !line.is_empty() && line.len() + 1 + s.len() > 80 {
            out.push_str(&line);
            out.push('\n');
            line.clear();
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(&s);
    }
    if !line.is_empty() {
        out.push_str(&line);
        out.push(' ');
    }
    out.push_str(r.result.result_token());
    out.push('\n');
    out
}

/// Splits a record file into documents with their byte offsets. A document
/// ends at the line whose last token is a result token.
pub fn split_documents(text: &str) -> Vec<(u64, &str)> {
    let mut docs = Vec::new();
    let mut start: Option<usize> = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if start.is_none() && !trimmed.is_empty() {
            start = Some(pos);
        }
        pos += line.len();
        if let Some(s) = start {
            let ends = !trimmed.starts_with('[') && trimmed.split_whitespace().last().is_some_and(is_result_token);
            if ends {
                docs.push((s as u64, &text[s..pos]));
                start = None;
            }
        }
    }
    if let Some(s) = start {
        docs.push((s as u64, &text[s..]));
    }
    docs
}

/// Parses every document; failures are reported per document.
pub fn parse_records(text: &str) -> Vec<Result<GameRecord, RecordError>> {
    split_documents(text).into_iter().map(|(_, d)| parse_record(d)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub parsed: usize,
    pub dropped_short: usize,
    pub dropped_disconnect: usize,
    pub kept: usize,
}

impl CleanStats {
    pub fn merge(&mut self, other: CleanStats) {
        self.parsed += other.parsed;
        self.dropped_short += other.dropped_short;
        self.dropped_disconnect += other.dropped_disconnect;
        self.kept += other.kept;
    }
}

/// Drops disconnected games and games under ten rounds, keeping order.
/// A record failing both rules counts as a disconnect.
pub fn clean<I: IntoIterator<Item = GameRecord>>(records: I) -> (Vec<GameRecord>, CleanStats) {
    let mut stats = CleanStats::default();
    let mut kept = Vec::new();
    for r in records {
        stats.parsed += 1;
        if r.termination == Termination::Disconnect {
            stats.dropped_disconnect += 1;
        } else if r.rounds() < MIN_ROUNDS {
            stats.dropped_short += 1;
        } else {
            stats.kept += 1;
            kept.push(r);
        }
    }
    (kept, stats)
}

/// `log(a·t + b) + c` with `a = a_scale / T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveParams {
    pub a_scale: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams { a_scale: 0.5, b: (-1.0f64).exp(), c: 1.5 }
    }
}

impl CurveParams {
    pub fn weight(&self, t: usize, total: usize) -> Result<f64, RecordError> {
        if total == 0 || t >= total {
            return Err(RecordError::Domain(format!("step {t} outside a game of length {total}")));
        }
        let w = (self.a_scale * t as f64 / total as f64 + self.b).ln() + self.c;
        if !(w.is_finite() && w > 0.0) {
            return Err(RecordError::Domain(format!("curve weight {w} at t={t}, T={total} is not positive")));
        }
        Ok(w)
    }
}

/// `log(t / 2T + e^-1) + 1.5`.
pub fn sample_weight(t: usize, total: usize) -> Result<f64, RecordError> {
    CurveParams::default().weight(t, total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Uniform,
    #[default]
    Curve,
}

/// A training example: the position before `chosen_move`, and the final
/// result from the mover's perspective.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoint {
    pub position: Position,
    pub chosen_move: Move,
    /// +1 win, 0 draw, -1 loss for the side to move.
    pub final_result: i8,
    pub t: usize,
    pub total: usize,
}

impl SamplePoint {
    pub fn from_record(r: &GameRecord, t: usize) -> SamplePoint {
        let mut p = Position::startpos();
        for &m in &r.moves[..t] {
            p = p.apply_unchecked(m);
        }
        let final_result = r.result.score_for(p.side_to_move()) as i8;
        SamplePoint { position: p, chosen_move: r.moves[t], final_result, t, total: r.moves.len() }
    }
}

/// Two-stage draw: a game uniformly, then a step within it.
pub struct StepSampler {
    lengths: Vec<usize>,
    mode: SamplingMode,
    per_length: HashMap<usize, WeightedIndex<f64>>,
}

impl StepSampler {
    pub fn new(lengths: Vec<usize>, mode: SamplingMode, params: CurveParams) -> Result<StepSampler, RecordError> {
        if lengths.is_empty() {
            return Err(RecordError::EmptyDataset);
        }
        let mut per_length = HashMap::new();
        for &len in &lengths {
            if len == 0 {
                return Err(RecordError::Domain("game with no moves".into()));
            }
            if mode == SamplingMode::Curve && !per_length.contains_key(&len) {
                let w = (0..len).map(|t| params.weight(t, len)).collect::<Result<Vec<_>, _>>()?;
                per_length.insert(len, WeightedIndex::new(w).expect("positive weights"));
            }
        }
        Ok(StepSampler { lengths, mode, per_length })
    }

    /// `(game index, step)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let g = rng.gen_range(0..self.lengths.len());
        let len = self.lengths[g];
        let t = match self.mode {
            SamplingMode::Uniform => rng.gen_range(0..len),
            SamplingMode::Curve => self.per_length[&len].sample(rng),
        };
        (g, t)
    }
}

/// Draws `n` samples from in-memory records.
pub fn draw_from_records(
    records: &[GameRecord],
    n: usize,
    mode: SamplingMode,
    params: CurveParams,
    seed: u64,
) -> Result<Vec<SamplePoint>, RecordError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let sampler = StepSampler::new(records.iter().map(GameRecord::plies).collect(), mode, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (g, t) = sampler.sample(&mut rng);
            SamplePoint::from_record(&records[g], t)
        })
        .collect())
}

/// Byte offsets and lengths of the records in a record file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    path: PathBuf,
    offsets: Vec<u64>,
    lengths: Vec<u64>,
}

pub fn index_path(records: &Path) -> PathBuf {
    let mut s = records.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

impl DatasetIndex {
    /// Scans a record file; every document must parse.
    pub fn build(path: &Path) -> Result<DatasetIndex, RecordError> {
        let text = fs::read_to_string(path)?;
        let mut offsets = Vec::new();
        let mut lengths = Vec::new();
        for (off, doc) in split_documents(&text) {
            let r = parse_record(doc)?;
            offsets.push(off);
            lengths.push(r.plies() as u64);
        }
        let idx = DatasetIndex { path: path.to_path_buf(), offsets, lengths };
        idx.check()?;
        Ok(idx)
    }

    /// Reads the `.idx` sidecar next to `path`.
    pub fn open(path: &Path) -> Result<DatasetIndex, RecordError> {
        let bytes = fs::read(index_path(path))?;
        if bytes.len() % 16 != 0 {
            return Err(RecordError::Index(format!("sidecar length {} is not a multiple of 16", bytes.len())));
        }
        let mut offsets = Vec::new();
        let mut lengths = Vec::new();
        for pair in bytes.chunks_exact(16) {
            offsets.push(u64::from_le_bytes(pair[..8].try_into().unwrap()));
            lengths.push(u64::from_le_bytes(pair[8..].try_into().unwrap()));
        }
        let idx = DatasetIndex { path: path.to_path_buf(), offsets, lengths };
        idx.check()?;
        Ok(idx)
    }

    fn check(&self) -> Result<(), RecordError> {
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RecordError::Index("offsets are not strictly increasing".into()));
        }
        if self.lengths.iter().any(|&t| t == 0) {
            return Err(RecordError::Index("record with no moves".into()));
        }
        Ok(())
    }

    pub fn write_sidecar(&self) -> Result<(), RecordError> {
        let mut w = BufWriter::new(fs::File::create(index_path(&self.path))?);
        for (o, t) in self.offsets.iter().zip(&self.lengths) {
            w.write_all(&o.to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn lengths(&self) -> &[u64] {
        &self.lengths
    }

    pub fn read_record(&self, i: usize) -> Result<GameRecord, RecordError> {
        let text = fs::read(&self.path)?;
        self.record_from(&text, i)
    }

    fn record_from(&self, text: &[u8], i: usize) -> Result<GameRecord, RecordError> {
        let start = *self.offsets.get(i).ok_or_else(|| RecordError::Index(format!("record {i} out of range")))? as usize;
        let end = self.offsets.get(i + 1).map_or(text.len(), |&o| o as usize);
        let doc = text.get(start..end).ok_or_else(|| RecordError::Index("offset past end of file".into()))?;
        parse_record(std::str::from_utf8(doc).map_err(|e| RecordError::Parse(e.to_string()))?)
    }

    pub fn load_all(&self) -> Result<Vec<GameRecord>, RecordError> {
        let text = fs::read(&self.path)?;
        (0..self.len()).map(|i| self.record_from(&text, i)).collect()
    }
}

/// Writes records as a record file plus sidecar index.
pub fn write_dataset(path: &Path, records: &[GameRecord]) -> Result<DatasetIndex, RecordError> {
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(records.len());
    let mut lengths = Vec::with_capacity(records.len());
    for r in records {
        if !text.is_empty() {
            text.push('\n');
        }
        offsets.push(text.len() as u64);
        lengths.push(r.plies() as u64);
        text.push_str(&serialize_record(r));
    }
    fs::write(path, &text)?;
    let idx = DatasetIndex { path: path.to_path_buf(), offsets, lengths };
    idx.check()?;
    idx.write_sidecar()?;
    Ok(idx)
}

pub fn draw_samples(idx: &DatasetIndex, n: usize, mode: SamplingMode, seed: u64) -> Result<Vec<SamplePoint>, RecordError> {
    draw_samples_with(idx, n, mode, CurveParams::default(), seed)
}

pub fn draw_samples_with(
    idx: &DatasetIndex,
    n: usize,
    mode: SamplingMode,
    params: CurveParams,
    seed: u64,
) -> Result<Vec<SamplePoint>, RecordError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let sampler = StepSampler::new(idx.lengths.iter().map(|&t| t as usize).collect(), mode, params)?;
    let text = fs::read(&idx.path)?;
    let mut cache: HashMap<usize, GameRecord> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (g, t) = sampler.sample(&mut rng);
        if !cache.contains_key(&g) {
            cache.insert(g, idx.record_from(&text, g)?);
        }
        out.push(SamplePoint::from_record(&cache[&g], t));
    }
    Ok(out)
}

/// Best move of the alpha-beta searcher.
pub fn annotate_with_searcher(p: &Position, cfg: &SearchConfig) -> Result<Move, RecordError> {
    match search(p, cfg) {
        Ok(r) => Ok(r.best),
        Err(SearchError::TerminalPosition) => Err(RecordError::TerminalPosition),
        Err(e) => Err(RecordError::Domain(e.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub games: usize,
    pub search: SearchConfig,
    /// Uniformly random plies played before the searcher takes over.
    pub random_opening_plies: usize,
    /// Chance of a random move in place of the searcher's after the opening.
    pub epsilon: f64,
    pub draw_move_cap: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { games: 100, search: SearchConfig::depth(1), random_opening_plies: 6, epsilon: 0.1, draw_move_cap: 120 }
    }
}

/// Searcher self-play games labelled move by move, for desk-scale datasets.
pub fn synthesize_games(cfg: &SynthConfig, seed: u64) -> Result<Vec<GameRecord>, RecordError> {
    let rules = DrawRules::with_cap(cfg.draw_move_cap);
    (0..cfg.games)
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (g as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut p = Position::startpos();
            let mut moves = Vec::new();
            let result = loop {
                if let Some(o) = p.terminal_with(&rules) {
                    break o;
                }
                let legal = p.legal_moves();
                let m = if moves.len() < cfg.random_opening_plies || rng.gen_bool(cfg.epsilon) {
                    legal[rng.gen_range(0..legal.len())]
                } else {
                    annotate_with_searcher(&p, &cfg.search)?
                };
                moves.push(m);
                p = p.apply_unchecked(m);
            };
            let mut r = GameRecord::new(moves, result);
            r.metadata.insert("Event".into(), format!("synthetic {g}"));
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests;
