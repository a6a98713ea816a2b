use crate::chess::{Move, PieceKind, Position};

use super::TrainingError;

/// Weight of one attacked square in the heuristic score, in pawns.
pub const MOBILITY_WEIGHT: f64 = 0.1;

/// A teacher's verdict on one position.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// Legal moves in UCI order with their probabilities.
    pub moves: Vec<(Move, f32)>,
    pub value: Option<f32>,
}

impl TeacherOutput {
    /// The most probable moves (several when tied).
    pub fn best_moves(&self) -> Vec<Move> {
        let max = self.moves.iter().map(|m| m.1).fold(f32::NEG_INFINITY, f32::max);
        self.moves.iter().filter(|m| m.1 == max).map(|m| m.0).collect()
    }
}

/// Anything that maps a non-terminal position to a distribution over its
/// legal moves.
pub trait Teacher: Sync {
    fn tag(&self) -> String;
    fn evaluate(&self, pos: &Position) -> Result<TeacherOutput, TrainingError>;
}

/// Scores each legal move by the material it wins plus
/// [`MOBILITY_WEIGHT`] times the number of squares the moved piece attacks
/// from its destination, then applies a softmax at `temperature`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicTeacher {
    pub temperature: f64,
}

impl Default for HeuristicTeacher {
    fn default() -> Self {
        HeuristicTeacher { temperature: 1.0 }
    }
}

/// Material (in pawns) won by `m`: the captured piece plus any promotion gain.
pub fn material_delta(pos: &Position, m: Move) -> f64 {
    let moving = pos.piece_at(m.from).expect("legal move has a piece");
    let captured = match pos.piece_at(m.to) {
        Some(p) => p.kind.value() as f64,
        None if moving.kind == PieceKind::Pawn && m.from.file() != m.to.file() => 1.0,
        None => 0.0,
    };
    let promotion = m
        .promotion
        .map_or(0.0, |k| k.value() as f64 - PieceKind::Pawn.value() as f64);
    captured + promotion
}

/// Heuristic score of a legal move.
pub fn move_score(pos: &Position, m: Move) -> f64 {
    let after = pos.apply_move(m).expect("move is legal");
    material_delta(pos, m) + MOBILITY_WEIGHT * after.mobility(m.to) as f64
}

/// Softmax of `scores / temperature`, accumulated in f64.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Heuristic policy over the legal moves of `pos`.
pub fn heuristic_teacher(pos: &Position, temperature: f64) -> Result<Vec<(Move, f32)>, TrainingError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TrainingError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let moves = pos.legal_moves();
    if moves.is_empty() {
        return Err(TrainingError::Terminal(pos.to_fen()));
    }
    let scores: Vec<f64> = moves.iter().map(|&m| move_score(pos, m)).collect();
    let probs = softmax(&scores, temperature);
    Ok(moves.into_iter().zip(probs).map(|(m, p)| (m, p as f32)).collect())
}

impl Teacher for HeuristicTeacher {
    fn tag(&self) -> String {
        format!("heuristic(T={})", self.temperature)
    }

    fn evaluate(&self, pos: &Position) -> Result<TeacherOutput, TrainingError> {
        Ok(TeacherOutput {
            moves: heuristic_teacher(pos, self.temperature)?,
            value: None,
        })
    }
}
