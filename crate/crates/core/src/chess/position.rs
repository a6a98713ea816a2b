use std::fmt;

use super::{ChessError, Color, Piece, PieceKind, Square};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CastlingRights {
    pub white_king: bool,
    pub white_queen: bool,
    pub black_king: bool,
    pub black_queen: bool,
}

impl CastlingRights {
    pub const ALL: CastlingRights = CastlingRights {
        white_king: true,
        white_queen: true,
        black_king: true,
        black_queen: true,
    };

    pub fn kingside(&self, c: Color) -> bool {
        match c {
            Color::White => self.white_king,
            Color::Black => self.black_king,
        }
    }

    pub fn queenside(&self, c: Color) -> bool {
        match c {
            Color::White => self.white_queen,
            Color::Black => self.black_queen,
        }
    }

    pub(crate) fn clear(&mut self, c: Color) {
        match c {
            Color::White => {
                self.white_king = false;
                self.white_queen = false;
            }
            Color::Black => {
                self.black_king = false;
                self.black_queen = false;
            }
        }
    }

    /// Drops any right whose king or rook home square is `sq`.
    pub(crate) fn touch(&mut self, sq: Square) {
        match sq.index() {
            0 => self.white_queen = false,
            4 => self.clear(Color::White),
            7 => self.white_king = false,
            56 => self.black_queen = false,
            60 => self.clear(Color::Black),
            63 => self.black_king = false,
            _ => {}
        }
    }

    pub fn swapped(&self) -> CastlingRights {
        CastlingRights {
            white_king: self.black_king,
            white_queen: self.black_queen,
            black_king: self.white_king,
            black_queen: self.white_queen,
        }
    }
}

/// Complete game state. Always satisfies the validity invariants checked by
/// [`Position::from_parts`]; the only constructors are that function and FEN
/// parsing.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Position {
    pub(crate) board: [Option<Piece>; 64],
    pub(crate) side_to_move: Color,
    pub(crate) castling: CastlingRights,
    pub(crate) en_passant: Option<Square>,
    pub(crate) halfmove_clock: u32,
    pub(crate) fullmove_number: u32,
}

pub const MAX_HALFMOVE_CLOCK: u32 = 150;

impl Position {
    pub fn startpos() -> Position {
        Position::from_fen(super::fen::START_FEN).expect("start FEN is valid")
    }

    /// Builds a position and checks every invariant: one king per color, no
    /// pawns on the back ranks, the side not to move is not in check,
    /// castling rights agree with king and rook placement, and the en-passant
    /// square is consistent with a double pawn push.
    pub fn from_parts(
        board: [Option<Piece>; 64],
        side_to_move: Color,
        castling: CastlingRights,
        en_passant: Option<Square>,
        halfmove_clock: u32,
        fullmove_number: u32,
    ) -> Result<Position, ChessError> {
        let pos = Position {
            board,
            side_to_move,
            castling,
            en_passant,
            halfmove_clock,
            fullmove_number,
        };
        pos.validate()?;
        Ok(pos)
    }

    pub(crate) fn validate(&self) -> Result<(), ChessError> {
        let invalid = |field: &'static str, detail: &str| ChessError::Fen {
            field,
            detail: detail.to_string(),
        };
        for color in Color::ALL {
            let kings = self
                .board
                .iter()
                .filter(|p| **p == Some(Piece::new(PieceKind::King, color)))
                .count();
            if kings != 1 {
                return Err(invalid(
                    "placement",
                    &format!("{color:?} has {kings} kings, expected exactly one"),
                ));
            }
        }
        for sq in Square::all() {
            if let Some(p) = self.board[sq.index()] {
                if p.kind == PieceKind::Pawn && (sq.rank() == 0 || sq.rank() == 7) {
                    return Err(invalid("placement", &format!("pawn on back rank at {sq}")));
                }
            }
        }
        let home_ok = |king: usize, rook: usize, color: Color| {
            self.board[king] == Some(Piece::new(PieceKind::King, color))
                && self.board[rook] == Some(Piece::new(PieceKind::Rook, color))
        };
        let c = self.castling;
        if (c.white_king && !home_ok(4, 7, Color::White))
            || (c.white_queen && !home_ok(4, 0, Color::White))
            || (c.black_king && !home_ok(60, 63, Color::Black))
            || (c.black_queen && !home_ok(60, 56, Color::Black))
        {
            return Err(invalid(
                "castling",
                "castling right without king and rook on their home squares",
            ));
        }
        if let Some(ep) = self.en_passant {
            // The pawn that just double-pushed belongs to the side not to move.
            let (ep_rank, pawn_rank) = match self.side_to_move {
                Color::White => (5, 4),
                Color::Black => (2, 3),
            };
            let pawn_sq = Square::new(ep.file(), pawn_rank).unwrap();
            let mover = self.side_to_move.opposite();
            if ep.rank() != ep_rank
                || self.board[ep.index()].is_some()
                || self.board[pawn_sq.index()] != Some(Piece::new(PieceKind::Pawn, mover))
            {
                return Err(invalid(
                    "en passant",
                    &format!("{ep} is not behind a freshly pushed pawn"),
                ));
            }
        }
        if self.halfmove_clock > MAX_HALFMOVE_CLOCK {
            return Err(invalid(
                "halfmove clock",
                &format!("{} exceeds {MAX_HALFMOVE_CLOCK}", self.halfmove_clock),
            ));
        }
        if self.fullmove_number < 1 {
            return Err(invalid("fullmove number", "must be at least 1"));
        }
        let waiting = self.side_to_move.opposite();
        if self.is_attacked(self.king_square(waiting), self.side_to_move) {
            return Err(invalid(
                "placement",
                "the side not to move is in check",
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn piece_at(&self, sq: Square) -> Option<Piece> {
        self.board[sq.index()]
    }

    pub fn board(&self) -> &[Option<Piece>; 64] {
        &self.board
    }

    pub fn side_to_move(&self) -> Color {
        self.side_to_move
    }

    pub fn castling(&self) -> CastlingRights {
        self.castling
    }

    pub fn en_passant(&self) -> Option<Square> {
        self.en_passant
    }

    pub fn halfmove_clock(&self) -> u32 {
        self.halfmove_clock
    }

    pub fn fullmove_number(&self) -> u32 {
        self.fullmove_number
    }

    pub fn king_square(&self, color: Color) -> Square {
        let king = Some(Piece::new(PieceKind::King, color));
        Square::all()
            .find(|sq| self.board[sq.index()] == king)
            .expect("valid positions have one king per color")
    }

    pub fn pieces(&self) -> impl Iterator<Item = (Square, Piece)> + '_ {
        Square::all().filter_map(|sq| self.board[sq.index()].map(|p| (sq, p)))
    }

    /// Colors swapped and ranks mirrored; the result is the same position
    /// seen from the other side.
    pub fn color_mirrored(&self) -> Position {
        let mut board = [None; 64];
        for (sq, p) in self.pieces() {
            board[sq.flip_rank().index()] = Some(Piece::new(p.kind, p.color.opposite()));
        }
        Position {
            board,
            side_to_move: self.side_to_move.opposite(),
            castling: self.castling.swapped(),
            en_passant: self.en_passant.map(Square::flip_rank),
            halfmove_clock: self.halfmove_clock,
            fullmove_number: self.fullmove_number,
        }
    }

    /// Moves the piece on `from` to the empty square `to`, clearing castling
    /// and en-passant state that would no longer be consistent. Used to build
    /// what-if variants of a position.
    pub fn with_piece_relocated(&self, from: Square, to: Square) -> Result<Position, ChessError> {
        let piece = self.board[from.index()].ok_or_else(|| {
            ChessError::InvalidPosition(format!("no piece on {from}"))
        })?;
        if self.board[to.index()].is_some() {
            return Err(ChessError::InvalidPosition(format!("{to} is occupied")));
        }
        let mut board = self.board;
        board[from.index()] = None;
        board[to.index()] = Some(piece);
        let mut castling = self.castling;
        castling.touch(from);
        Position::from_parts(
            board,
            self.side_to_move,
            castling,
            None,
            self.halfmove_clock,
            self.fullmove_number,
        )
        .map_err(|e| ChessError::InvalidPosition(e.to_string()))
    }

    /// Side to move flipped and en passant cleared, without validation. The
    /// result may leave the waiting side in check.
    pub(crate) fn null_move(&self) -> Position {
        let mut p = self.clone();
        p.side_to_move = p.side_to_move.opposite();
        p.en_passant = None;
        p
    }

    pub fn count(&self, kind: PieceKind, color: Color) -> usize {
        let target = Some(Piece::new(kind, color));
        self.board.iter().filter(|p| **p == target).count()
    }

    /// 64-bit FNV-1a of the FEN text; stable across runs and platforms.
    pub fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_fen().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

impl fmt::Debug for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Position({})", self.to_fen())
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rank in (0..8).rev() {
            for file in 0..8 {
                let sq = Square::new(file, rank).unwrap();
                let c = self.board[sq.index()].map_or('.', Piece::fen_char);
                write!(f, "{c}")?;
                if file < 7 {
                    write!(f, " ")?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
