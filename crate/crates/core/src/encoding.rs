//! Input plane encoding.
//!
//! A [`PlaneStack`] is an `(8, 8, C)` tensor stored row-major with channels
//! innermost: element `(row, file, c)` lives at `(row * 8 + file) * C + c`.
//! Rows are ranks seen from the side to move, so row 0 is rank 1 when White
//! is to move and rank 8 when Black is to move.
//!
//! Each history slot occupies `planes_per_position` consecutive channels,
//! the current position first. Within a slot:
//!
//! | plane  | content                                                        |
//! |--------|----------------------------------------------------------------|
//! | 0-5    | mover's pawns, knights, bishops, rooks, queens, king            |
//! | 6-11   | opponent's pawns, knights, bishops, rooks, queens, king         |
//! | 12-15  | castling: mover O-O, mover O-O-O, opponent O-O, opponent O-O-O  |
//! | 16     | all ones if Black is to move in that slot's position            |
//! | 17     | halfmove clock / 100, clipped to [0, 1]                         |
//! | 18     | all zeros                                                       |
//! | 19     | all ones                                                        |
//! | 20     | zero-filled (only with the 21-plane layout)                     |
//!
//! Castling planes are zero unless `include_castling_planes` is set. Slots
//! for history older than what was supplied are entirely zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{Color, Piece, PieceKind, Position, Square};

pub const PIECE_PLANES: usize = 12;
pub const PLANE_CASTLING: usize = 12;
pub const PLANE_BLACK_TO_MOVE: usize = 16;
pub const PLANE_HALFMOVE: usize = 17;
pub const PLANE_ZEROS: usize = 18;
pub const PLANE_ONES: usize = 19;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("cannot encode an empty position history")]
    EmptyHistory,
    #[error("invalid encoding config: {0}")]
    Config(String),
    #[error("corrupt plane stack: {0}")]
    Corrupt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub history_length: usize,
    pub planes_per_position: usize,
    pub include_castling_planes: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            history_length: 1,
            planes_per_position: 20,
            include_castling_planes: false,
        }
    }
}

impl EncodingConfig {
    /// The eight-position stacked variant.
    pub fn stacked() -> Self {
        EncodingConfig {
            history_length: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.history_length == 0 {
            return Err(EncodingError::Config("history_length must be at least 1".into()));
        }
        if !matches!(self.planes_per_position, 20 | 21) {
            return Err(EncodingError::Config(format!(
                "planes_per_position must be 20 or 21, got {}",
                self.planes_per_position
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.history_length * self.planes_per_position
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneStack {
    pub data: Vec<f32>,
    pub config: EncodingConfig,
}

impl PlaneStack {
    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    pub fn shape(&self) -> [usize; 3] {
        [8, 8, self.channels()]
    }

    #[inline]
    pub fn get(&self, row: usize, file: usize, channel: usize) -> f32 {
        self.data[(row * 8 + file) * self.channels() + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, file: usize, channel: usize, v: f32) {
        let c = self.channels();
        self.data[(row * 8 + file) * c + channel] = v;
    }

    /// Sum of one channel over the board.
    pub fn plane_sum(&self, channel: usize) -> f32 {
        (0..64).map(|i| self.data[i * self.channels() + channel]).sum()
    }
}

/// Row of `sq` in the frame of `mover`.
#[inline]
pub fn oriented_row(sq: Square, mover: Color) -> usize {
    match mover {
        Color::White => sq.rank() as usize,
        Color::Black => 7 - sq.rank() as usize,
    }
}

/// Square at `(row, file)` in the frame of `mover`.
#[inline]
pub fn square_at(row: usize, file: usize, mover: Color) -> Square {
    let rank = match mover {
        Color::White => row,
        Color::Black => 7 - row,
    };
    Square::new(file as i32, rank as i32).unwrap()
}

/// Channel of a piece relative to `mover`: 0-5 own, 6-11 opponent.
#[inline]
pub fn piece_channel(piece: Piece, mover: Color) -> usize {
    piece.kind.index() + if piece.color == mover { 0 } else { 6 }
}

/// Encodes a history (oldest first, current position last).
pub fn encode(history: &[Position], cfg: &EncodingConfig) -> Result<PlaneStack, EncodingError> {
    cfg.validate()?;
    let current = history.last().ok_or(EncodingError::EmptyHistory)?;
    let mover = current.side_to_move();
    let channels = cfg.channels();
    let mut ps = PlaneStack {
        data: vec![0.0; 64 * channels],
        config: *cfg,
    };
    let ppp = cfg.planes_per_position;
    for (slot, pos) in history.iter().rev().take(cfg.history_length).enumerate() {
        let base = slot * ppp;
        for (sq, piece) in pos.pieces() {
            let idx = (oriented_row(sq, mover) * 8 + sq.file() as usize) * channels;
            ps.data[idx + base + piece_channel(piece, mover)] = 1.0;
        }
        let castling = pos.castling();
        let opp = mover.opposite();
        let castle_flags = [
            castling.kingside(mover),
            castling.queenside(mover),
            castling.kingside(opp),
            castling.queenside(opp),
        ];
        let clock = (pos.halfmove_clock() as f32 / 100.0).clamp(0.0, 1.0);
        let black = if pos.side_to_move() == Color::Black { 1.0 } else { 0.0 };
        for cell in ps.data.chunks_exact_mut(channels) {
            let planes = &mut cell[base..base + ppp];
            if cfg.include_castling_planes {
                for (k, &flag) in castle_flags.iter().enumerate() {
                    planes[PLANE_CASTLING + k] = if flag { 1.0 } else { 0.0 };
                }
            }
            planes[PLANE_BLACK_TO_MOVE] = black;
            planes[PLANE_HALFMOVE] = clock;
            planes[PLANE_ZEROS] = 0.0;
            planes[PLANE_ONES] = 1.0;
        }
    }
    Ok(ps)
}

/// Convenience for a single position without history.
pub fn encode_position(pos: &Position, cfg: &EncodingConfig) -> Result<PlaneStack, EncodingError> {
    encode(std::slice::from_ref(pos), cfg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedPlacement {
    pub board: [Option<Piece>; 64],
    pub side_to_move: Color,
}

/// Recovers the piece placement and side to move of the current slot.
pub fn decode_piece_planes(ps: &PlaneStack) -> Result<DecodedPlacement, EncodingError> {
    let side_to_move = if ps.get(0, 0, PLANE_BLACK_TO_MOVE) > 0.5 {
        Color::Black
    } else {
        Color::White
    };
    let mut board = [None; 64];
    for row in 0..8 {
        for file in 0..8 {
            let sq = square_at(row, file, side_to_move);
            for ch in 0..PIECE_PLANES {
                let v = ps.get(row, file, ch);
                if v == 0.0 {
                    continue;
                }
                if v != 1.0 {
                    return Err(EncodingError::Corrupt(format!(
                        "non-binary value {v} in piece plane {ch} at {sq}"
                    )));
                }
                let kind = PieceKind::from_index(ch % 6).unwrap();
                let color = if ch < 6 { side_to_move } else { side_to_move.opposite() };
                if board[sq.index()].is_some() {
                    return Err(EncodingError::Corrupt(format!("two pieces on {sq}")));
                }
                board[sq.index()] = Some(Piece::new(kind, color));
            }
        }
    }
    Ok(DecodedPlacement {
        board,
        side_to_move,
    })
}
