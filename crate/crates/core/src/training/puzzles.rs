use std::io::Read;

use log::warn;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::chess::{Move, Position};
use crate::explain::{explain_all_moves, Explanation};
use crate::network::{MaskerNet, PolicyValueNet};
use crate::par::{self, Exec};

/// One puzzle: a position and its single best move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuzzleCase {
    pub id: String,
    pub fen: String,
    pub best_move: String,
}

/// Reads a CSV with at least the columns `id,fen,best_move`; other columns
/// are ignored.
pub fn load_puzzles<R: Read>(input: R) -> Result<Vec<PuzzleCase>, TrainingError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PuzzleCase>().enumerate() {
        out.push(row.map_err(|e| TrainingError::Import {
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuzzleResult {
    pub id: String,
    pub fen: String,
    pub best_move: String,
    pub top_move: String,
    pub solved: bool,
    pub best_move_prob: f32,
    pub explanation: Explanation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPuzzle {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PuzzleReport {
    pub results: Vec<PuzzleResult>,
    pub skipped: Vec<SkippedPuzzle>,
    /// Fraction solved, or `None` when no puzzle was evaluated.
    pub solve_rate: Option<f64>,
}

fn check(case: &PuzzleCase) -> Result<(Position, Move), String> {
    let pos = Position::from_fen(&case.fen).map_err(|e| e.to_string())?;
    let m: Move = case.best_move.parse().map_err(|e: crate::chess::ChessError| e.to_string())?;
    if !pos.legal_moves().contains(&m) {
        return Err(format!("best move {} is not legal", case.best_move));
    }
    Ok((pos, m))
}

/// Scores each puzzle by the unmasked top-1 move. Puzzles with a bad FEN
/// or an illegal best move are skipped and logged.
pub fn eval_puzzles(net: &PolicyValueNet, masker: &MaskerNet, puzzles: &[PuzzleCase], exec: Exec) -> PuzzleReport {
    let outcomes = par::map(exec, puzzles, |case| {
        let (pos, best) = check(case)?;
        let e = explain_all_moves(net, masker, &pos, None).map_err(|e| e.to_string())?;
        let best = best.to_string();
        Ok::<_, String>(PuzzleResult {
            id: case.id.clone(),
            fen: case.fen.clone(),
            top_move: e.best_move.clone(),
            solved: e.best_move == best,
            best_move_prob: e.prob_of(&best).unwrap_or(0.0),
            best_move: best,
            explanation: e,
        })
    });
    let mut report = PuzzleReport::default();
    for (case, outcome) in puzzles.iter().zip(outcomes) {
        match outcome {
            Ok(r) => report.results.push(r),
            Err(reason) => {
                warn!("skipping puzzle {}: {reason}", case.id);
                report.skipped.push(SkippedPuzzle {
                    id: case.id.clone(),
                    reason,
                });
            }
        }
    }
    if !report.results.is_empty() {
        let solved = report.results.iter().filter(|r| r.solved).count();
        report.solve_rate = Some(solved as f64 / report.results.len() as f64);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{MaskerConfig, ModelConfig};

    #[test]
    fn puzzle_examples() {
        let net = PolicyValueNet::new(ModelConfig::tiny(), 1).unwrap();
        let masker = MaskerNet::new(MaskerConfig::default(), 2).unwrap();
        let empty = eval_puzzles(&net, &masker, &[], Exec::Sequential);
        assert!(empty.results.is_empty());
        assert_eq!(empty.solve_rate, None);

        let csv = "id,fen,best_move,rating\n\
                   forced,7k/8/5Q1K/8/8/8/8/8 b - - 0 1,h8g8,1500\n\
                   bad,rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1,e2e5,900\n";
        let puzzles = load_puzzles(csv.as_bytes()).unwrap();
        assert_eq!(puzzles.len(), 2);
        let report = eval_puzzles(&net, &masker, &puzzles, Exec::Sequential);
        assert_eq!(report.results.len(), 1);
        assert!(report.results[0].solved);
        assert_eq!(report.results[0].best_move_prob, 1.0);
        assert_eq!(report.skipped[0].id, "bad");
        assert_eq!(report.solve_rate, Some(1.0));
    }
}
