//! Mapping between moves and the flat policy vector.
//!
//! The policy vector has `64 * 64 * 5` entries indexed by
//! `from * 320 + to * 5 + promotion`, where squares are numbered in the
//! frame of the side to move (`row * 8 + file`, row 0 = mover's back rank)
//! and promotion is 0 for none, then knight, bishop, rook, queen.
//!
//! The network head scores 73 move types per from-square (56 queen-style
//! rays, 8 knight jumps, 9 under-promotions); [`head_gather_map`] lays those
//! scores out in policy-vector order.

use std::sync::{Arc, OnceLock};

use crate::autodiff::GATHER_NONE;
use crate::chess::{Color, Move, PieceKind, Position, Square};
use crate::encoding::{oriented_row, square_at};

pub const POLICY_SIZE: usize = 64 * 64 * 5;
pub const MOVE_TYPES: usize = 73;
pub const HEAD_SIZE: usize = 64 * MOVE_TYPES;

const RAYS: [(i32, i32); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];
const KNIGHT: [(i32, i32); 8] = [
    (1, 2),
    (2, 1),
    (2, -1),
    (1, -2),
    (-1, -2),
    (-2, -1),
    (-2, 1),
    (-1, 2),
];

fn promo_slot(p: Option<PieceKind>) -> usize {
    match p {
        None => 0,
        Some(PieceKind::Knight) => 1,
        Some(PieceKind::Bishop) => 2,
        Some(PieceKind::Rook) => 3,
        Some(PieceKind::Queen) => 4,
        Some(k) => panic!("{k:?} is not a promotion piece"),
    }
}

fn slot_promo(slot: usize) -> Option<PieceKind> {
    match slot {
        1 => Some(PieceKind::Knight),
        2 => Some(PieceKind::Bishop),
        3 => Some(PieceKind::Rook),
        4 => Some(PieceKind::Queen),
        _ => None,
    }
}

fn oriented_index(sq: Square, mover: Color) -> usize {
    oriented_row(sq, mover) * 8 + sq.file() as usize
}

/// Policy-vector index of `m` played by `mover`.
pub fn move_index(m: Move, mover: Color) -> usize {
    oriented_index(m.from, mover) * 320 + oriented_index(m.to, mover) * 5 + promo_slot(m.promotion)
}

/// Inverse of [`move_index`].
pub fn index_move(index: usize, mover: Color) -> Move {
    assert!(index < POLICY_SIZE, "policy index {index} out of range");
    let from = index / 320;
    let to = (index / 5) % 64;
    let slot = index % 5;
    Move::new(
        square_at(from / 8, from % 8, mover),
        square_at(to / 8, to % 8, mover),
        slot_promo(slot),
    )
}

/// Sorted policy indices of the legal moves of `pos`.
pub fn support_indices(pos: &Position) -> Vec<u32> {
    let mover = pos.side_to_move();
    let mut idx: Vec<u32> = pos
        .legal_moves()
        .into_iter()
        .map(|m| move_index(m, mover) as u32)
        .collect();
    idx.sort_unstable();
    idx
}

/// Head move type for an oriented (from, to, promotion) triple, if the
/// geometry is expressible.
fn move_type(from: usize, to: usize, slot: usize) -> Option<usize> {
    let (fr, ff) = ((from / 8) as i32, (from % 8) as i32);
    let (tr, tf) = ((to / 8) as i32, (to % 8) as i32);
    let (dr, df) = (tr - fr, tf - ff);
    if (1..=3).contains(&slot) {
        // Under-promotion: from row 6 to row 7, straight or capturing.
        if fr != 6 || tr != 7 || df.abs() > 1 {
            return None;
        }
        return Some(64 + (slot - 1) * 3 + (df + 1) as usize);
    }
    if slot == 4 && (fr != 6 || tr != 7 || df.abs() > 1) {
        return None;
    }
    if let Some(k) = KNIGHT.iter().position(|&(a, b)| a == df && b == dr) {
        return if slot == 0 { Some(56 + k) } else { None };
    }
    let dist = dr.abs().max(df.abs());
    if dist == 0 || !(dr == 0 || df == 0 || dr.abs() == df.abs()) {
        return None;
    }
    let dir = RAYS.iter().position(|&(a, b)| a == df.signum() && b == dr.signum())?;
    Some(dir * 7 + (dist - 1) as usize)
}

/// For every policy index, the head logit it reads (`from * 73 + type`), or
/// [`GATHER_NONE`] when no chess move has that geometry.
pub fn head_gather_map() -> Arc<[u32]> {
    static MAP: OnceLock<Arc<[u32]>> = OnceLock::new();
    MAP.get_or_init(|| {
        (0..POLICY_SIZE)
            .map(|i| {
                let (from, to, slot) = (i / 320, (i / 5) % 64, i % 5);
                move_type(from, to, slot).map_or(GATHER_NONE, |t| (from * MOVE_TYPES + t) as u32)
            })
            .collect::<Vec<u32>>()
            .into()
    })
    .clone()
}
