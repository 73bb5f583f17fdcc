use rand::Rng;

use super::{ModelError, Network};
use crate::encoding::{canonical_index, encode, LegalityMask};
use crate::rules::{Move, Position};

/// `p_i ∝ exp(logits_i / τ)` over the mask, accumulated in f64. `τ == 0` gives
/// a one-hot on the first maximal legal index. Masked entries are exactly 0.
pub fn masked_distribution(logits: &[f32], mask: &LegalityMask, tau: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    let legal: Vec<usize> = mask.legal_indices().collect();
    if legal.is_empty() {
        return out;
    }
    if tau <= 0.0 {
        let best = legal
            .iter()
            .copied()
            .fold(None::<usize>, |b, i| match b {
                Some(j) if logits[j] >= logits[i] => Some(j),
                _ => Some(i),
            })
            .unwrap();
        out[best] = 1.0;
        return out;
    }
    let probs = tempered_distribution(&legal.iter().map(|&i| logits[i] as f64).collect::<Vec<_>>(), tau);
    for (&i, p) in legal.iter().zip(probs) {
        out[i] = p as f32;
    }
    out
}

/// Softmax of `logits / τ` for `τ > 0`.
pub fn tempered_distribution(logits: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Draws an index of `weights` (need not be normalised). `τ == 0` is handled by callers.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Legal moves in ascending action index with their policy logits and the value.
pub fn move_logits(net: &Network, p: &Position) -> Result<(Vec<Move>, Vec<f32>, f32), ModelError> {
    let moves = p.legal_moves();
    if moves.is_empty() {
        return Err(ModelError::TerminalPosition);
    }
    let out = net.evaluate(&encode(p, net.feature_variant()));
    let mover = p.side_to_move();
    let logits = moves.iter().map(|&m| out.logits[canonical_index(m, mover)]).collect();
    Ok((moves, logits, out.value))
}

/// First move with the largest logit; moves arrive in ascending action index.
pub fn argmax_move(moves: &[Move], logits: &[f32]) -> Move {
    let mut best = 0;
    for i in 1..moves.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    moves[best]
}

pub fn sample_move<R: Rng + ?Sized>(net: &Network, p: &Position, tau: f64, rng: &mut R) -> Result<Move, ModelError> {
    let (moves, logits, _) = move_logits(net, p)?;
    if tau <= 0.0 {
        return Ok(argmax_move(&moves, &logits));
    }
    let probs = tempered_distribution(&logits.iter().map(|&l| l as f64).collect::<Vec<_>>(), tau);
    Ok(moves[sample_index(&probs, rng)])
}
