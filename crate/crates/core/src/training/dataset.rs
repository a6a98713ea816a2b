use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::corpus::Game;
use super::{Teacher, TeacherOutput, TrainingError};
use crate::chess::{Move, Position};
use crate::encoding::{encode, EncodingConfig, PlaneStack};
use crate::network::{move_index, support_indices};
use crate::par::{self, Exec};

/// Allowed deviation of an imported row's probability mass from 1.
pub const IMPORT_SUM_TOLERANCE: f64 = 1e-4;
/// Allowed deviation of an in-process teacher's mass from 1.
pub const TEACHER_SUM_TOLERANCE: f64 = 1e-6;

/// One (position, teacher policy) training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    /// Oldest first; the last entry is the position itself.
    pub history: Vec<Position>,
    /// Sorted policy indices of the legal moves.
    pub support: Vec<u32>,
    /// Teacher probabilities keyed by policy index, sorted by index.
    pub policy: Vec<(u32, f32)>,
    pub value: Option<f32>,
    pub game: Option<u32>,
}

impl DistillRecord {
    pub fn position(&self) -> &Position {
        self.history.last().expect("record has a position")
    }

    pub fn encode(&self, cfg: &EncodingConfig) -> PlaneStack {
        let start = self.history.len().saturating_sub(cfg.history_length);
        encode(&self.history[start..], cfg).expect("history is non-empty")
    }

    /// Policy indices holding the largest teacher probability.
    pub fn teacher_argmax(&self) -> Vec<u32> {
        let max = self.policy.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max);
        self.policy.iter().filter(|p| p.1 == max).map(|p| p.0).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillDataset {
    pub records: Vec<DistillRecord>,
    pub teacher: String,
}

impl DistillDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn game_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().filter_map(|r| r.game).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn record_from_output(
    history: Vec<Position>,
    out: TeacherOutput,
    game: Option<u32>,
    tolerance: f64,
) -> Result<DistillRecord, TrainingError> {
    let pos = history.last().expect("non-empty history");
    let mover = pos.side_to_move();
    let support = support_indices(pos);
    if support.is_empty() {
        return Err(TrainingError::Terminal(pos.to_fen()));
    }
    let sum: f64 = out.moves.iter().map(|&(_, p)| p as f64).sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(TrainingError::Unnormalized { fen: pos.to_fen(), sum });
    }
    let mut policy: Vec<(u32, f32)> = out
        .moves
        .iter()
        .map(|&(m, p)| (move_index(m, mover) as u32, p))
        .collect();
    policy.sort_by_key(|e| e.0);
    for pair in policy.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(TrainingError::Unnormalized { fen: pos.to_fen(), sum });
        }
    }
    if let Some(&(i, _)) = policy.iter().find(|(i, _)| support.binary_search(i).is_err()) {
        let m = crate::network::index_move(i as usize, mover);
        return Err(TrainingError::IllegalMove { fen: pos.to_fen(), uci: m.to_string() });
    }
    Ok(DistillRecord {
        history,
        support,
        policy,
        value: out.value,
        game,
    })
}

/// Labels each position (without history) with the teacher.
pub fn build_distill_dataset(
    teacher: &dyn Teacher,
    positions: &[Position],
    exec: Exec,
) -> Result<DistillDataset, TrainingError> {
    let records = par::map(exec, positions, |p| {
        let out = teacher.evaluate(p)?;
        record_from_output(vec![p.clone()], out, None, TEACHER_SUM_TOLERANCE)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(DistillDataset {
        records,
        teacher: teacher.tag(),
    })
}

/// Labels every position of every game, keeping up to `history_length`
/// preceding positions with each record.
pub fn build_from_games(
    teacher: &dyn Teacher,
    games: &[Game],
    history_length: usize,
    exec: Exec,
) -> Result<DistillDataset, TrainingError> {
    let items: Vec<(u32, usize, &[Position])> = games
        .iter()
        .flat_map(|g| (0..g.positions.len()).map(move |i| (g.id, i, g.positions.as_slice())))
        .collect();
    let records = par::map(exec, &items, |&(id, i, positions)| {
        let start = (i + 1).saturating_sub(history_length.max(1));
        let history = positions[start..=i].to_vec();
        let out = teacher.evaluate(&positions[i])?;
        record_from_output(history, out, Some(id), TEACHER_SUM_TOLERANCE)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(DistillDataset {
        records,
        teacher: teacher.tag(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportMove {
    uci: String,
    p: f32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportRow {
    fen: String,
    moves: Vec<ImportMove>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f32>,
}

fn import_row(line: &str, lineno: usize) -> Result<DistillRecord, TrainingError> {
    let err = |msg: String| TrainingError::Import { line: lineno, msg };
    let row: ImportRow = serde_json::from_str(line).map_err(|e| err(format!("schema: {e}")))?;
    let pos = Position::from_fen(&row.fen).map_err(|e| err(e.to_string()))?;
    let legal = pos.legal_moves();
    if legal.is_empty() {
        return Err(err(format!("terminal position {}", row.fen)));
    }
    let mut moves = Vec::with_capacity(row.moves.len());
    for m in &row.moves {
        let mv: Move = m.uci.parse().map_err(|e: crate::chess::ChessError| err(e.to_string()))?;
        if !legal.contains(&mv) {
            return Err(err(format!("illegal move {} in {}", m.uci, row.fen)));
        }
        if !(m.p >= 0.0 && m.p.is_finite()) {
            return Err(err(format!("probability {} for {} is not in [0, 1]", m.p, m.uci)));
        }
        if moves.iter().any(|&(x, _)| x == mv) {
            return Err(err(format!("move {} listed twice", m.uci)));
        }
        moves.push((mv, m.p));
    }
    if let Some(v) = row.value {
        if !(-1.0..=1.0).contains(&v) {
            return Err(err(format!("value {v} outside [-1, 1]")));
        }
    }
    let out = TeacherOutput { moves, value: row.value };
    record_from_output(vec![pos], out, None, IMPORT_SUM_TOLERANCE).map_err(|e| match e {
        TrainingError::Unnormalized { sum, .. } => err(format!("probabilities sum to {sum}")),
        other => err(other.to_string()),
    })
}

/// Reads teacher policies from JSON lines
/// (`{"fen": ..., "moves": [{"uci": ..., "p": ...}], "value": optional}`).
/// Blank lines are ignored; line numbers in errors are 1-based.
pub fn import_teacher_policies<R: BufRead>(input: R, tag: &str) -> Result<DistillDataset, TrainingError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(import_row(&line, i + 1)?);
    }
    Ok(DistillDataset {
        records,
        teacher: tag.to_string(),
    })
}

/// Writes records in the import format, moves in UCI order.
pub fn export_teacher_policies<W: Write>(ds: &DistillDataset, mut out: W) -> Result<(), TrainingError> {
    for r in &ds.records {
        let pos = r.position();
        let mover = pos.side_to_move();
        let mut moves: Vec<(Move, f32)> = r
            .policy
            .iter()
            .map(|&(i, p)| (crate::network::index_move(i as usize, mover), p))
            .collect();
        moves.sort_by_key(|m| m.0);
        let row = ImportRow {
            fen: pos.to_fen(),
            moves: moves
                .into_iter()
                .map(|(m, p)| ImportMove { uci: m.to_string(), p })
                .collect(),
            value: r.value,
        };
        serde_json::to_writer(&mut out, &row).map_err(|e| TrainingError::Config(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
