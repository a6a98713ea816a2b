use super::{ChessError, Color, Move, Piece, PieceKind, Position, Square};
use crate::par::{self, Exec};

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
const KING: [(i32, i32); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];
const ORTHOGONAL: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const DIAGONAL: [(i32, i32); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

fn forward(c: Color) -> i32 {
    match c {
        Color::White => 1,
        Color::Black => -1,
    }
}

impl Position {
    /// True if any piece of `by` attacks `target`.
    pub fn is_attacked(&self, target: Square, by: Color) -> bool {
        let has = |sq: Option<Square>, kinds: &[PieceKind]| {
            sq.and_then(|s| self.board[s.index()])
                .is_some_and(|p| p.color == by && kinds.contains(&p.kind))
        };
        // A pawn of `by` attacks target from one rank behind (relative to `by`).
        let dr = -forward(by);
        if has(target.offset(-1, dr), &[PieceKind::Pawn]) || has(target.offset(1, dr), &[PieceKind::Pawn]) {
            return true;
        }
        if KNIGHT.iter().any(|&(df, dr)| has(target.offset(df, dr), &[PieceKind::Knight])) {
            return true;
        }
        if KING.iter().any(|&(df, dr)| has(target.offset(df, dr), &[PieceKind::King])) {
            return true;
        }
        let slider = |dirs: &[(i32, i32)], kinds: &[PieceKind]| {
            dirs.iter().any(|&(df, dr)| {
                let mut cur = target.offset(df, dr);
                while let Some(sq) = cur {
                    if let Some(p) = self.board[sq.index()] {
                        return p.color == by && kinds.contains(&p.kind);
                    }
                    cur = sq.offset(df, dr);
                }
                false
            })
        };
        slider(&ORTHOGONAL, &[PieceKind::Rook, PieceKind::Queen])
            || slider(&DIAGONAL, &[PieceKind::Bishop, PieceKind::Queen])
    }

    /// Squares the piece on `sq` attacks that are not occupied by its own
    /// side; 0 for an empty square.
    pub fn mobility(&self, sq: Square) -> usize {
        let Some(piece) = self.board[sq.index()] else {
            return 0;
        };
        let open = |t: Square| self.board[t.index()].is_none_or(|p| p.color != piece.color);
        let steps = |dirs: &[(i32, i32)]| {
            dirs.iter()
                .filter_map(|&(df, dr)| sq.offset(df, dr))
                .filter(|&t| open(t))
                .count()
        };
        let rays = |dirs: &[(i32, i32)]| {
            let mut n = 0;
            for &(df, dr) in dirs {
                let mut cur = sq.offset(df, dr);
                while let Some(t) = cur {
                    match self.board[t.index()] {
                        None => n += 1,
                        Some(p) => {
                            n += (p.color != piece.color) as usize;
                            break;
                        }
                    }
                    cur = t.offset(df, dr);
                }
            }
            n
        };
        match piece.kind {
            PieceKind::Pawn => steps(&[(-1, forward(piece.color)), (1, forward(piece.color))]),
            PieceKind::Knight => steps(&KNIGHT),
            PieceKind::King => steps(&KING),
            PieceKind::Bishop => rays(&DIAGONAL),
            PieceKind::Rook => rays(&ORTHOGONAL),
            PieceKind::Queen => rays(&DIAGONAL) + rays(&ORTHOGONAL),
        }
    }

    /// Whether the side to move is in check.
    pub fn is_check(&self) -> bool {
        self.is_attacked(self.king_square(self.side_to_move), self.side_to_move.opposite())
    }

    pub fn is_checkmate(&self) -> bool {
        self.is_check() && self.legal_moves().is_empty()
    }

    pub fn is_stalemate(&self) -> bool {
        !self.is_check() && self.legal_moves().is_empty()
    }

    fn pseudo_legal(&self, out: &mut Vec<Move>) {
        let us = self.side_to_move;
        for (from, piece) in self.pieces() {
            if piece.color != us {
                continue;
            }
            match piece.kind {
                PieceKind::Pawn => self.pawn_moves(from, out),
                PieceKind::Knight => self.step_moves(from, &KNIGHT, out),
                PieceKind::King => {
                    self.step_moves(from, &KING, out);
                    self.castling_moves(from, out);
                }
                PieceKind::Bishop => self.slide_moves(from, &DIAGONAL, out),
                PieceKind::Rook => self.slide_moves(from, &ORTHOGONAL, out),
                PieceKind::Queen => {
                    self.slide_moves(from, &DIAGONAL, out);
                    self.slide_moves(from, &ORTHOGONAL, out);
                }
            }
        }
    }

    fn push_pawn(from: Square, to: Square, out: &mut Vec<Move>) {
        if to.rank() == 0 || to.rank() == 7 {
            for k in PieceKind::PROMOTIONS {
                out.push(Move::new(from, to, Some(k)));
            }
        } else {
            out.push(Move::new(from, to, None));
        }
    }

    fn pawn_moves(&self, from: Square, out: &mut Vec<Move>) {
        let us = self.side_to_move;
        let dir = forward(us);
        if let Some(one) = from.offset(0, dir) {
            if self.board[one.index()].is_none() {
                Self::push_pawn(from, one, out);
                let start_rank = if us == Color::White { 1 } else { 6 };
                if from.rank() == start_rank {
                    let two = one.offset(0, dir).unwrap();
                    if self.board[two.index()].is_none() {
                        out.push(Move::new(from, two, None));
                    }
                }
            }
        }
        for df in [-1, 1] {
            if let Some(to) = from.offset(df, dir) {
                let capture = self.board[to.index()].is_some_and(|p| p.color != us);
                if capture || self.en_passant == Some(to) {
                    Self::push_pawn(from, to, out);
                }
            }
        }
    }

    fn step_moves(&self, from: Square, steps: &[(i32, i32)], out: &mut Vec<Move>) {
        for &(df, dr) in steps {
            if let Some(to) = from.offset(df, dr) {
                if self.board[to.index()].is_none_or(|p| p.color != self.side_to_move) {
                    out.push(Move::new(from, to, None));
                }
            }
        }
    }

    fn slide_moves(&self, from: Square, dirs: &[(i32, i32)], out: &mut Vec<Move>) {
        for &(df, dr) in dirs {
            let mut cur = from.offset(df, dr);
            while let Some(to) = cur {
                match self.board[to.index()] {
                    None => out.push(Move::new(from, to, None)),
                    Some(p) => {
                        if p.color != self.side_to_move {
                            out.push(Move::new(from, to, None));
                        }
                        break;
                    }
                }
                cur = to.offset(df, dr);
            }
        }
    }

    fn castling_moves(&self, from: Square, out: &mut Vec<Move>) {
        let us = self.side_to_move;
        let them = us.opposite();
        let home = if us == Color::White { 4 } else { 60 };
        if from.index() != home || self.is_attacked(from, them) {
            return;
        }
        let empty = |i: usize| self.board[i].is_none();
        let safe = |i: usize| !self.is_attacked(Square::from_index(i), them);
        if self.castling.kingside(us) && empty(home + 1) && empty(home + 2) && safe(home + 1) {
            out.push(Move::new(from, Square::from_index(home + 2), None));
        }
        if self.castling.queenside(us)
            && empty(home - 1)
            && empty(home - 2)
            && empty(home - 3)
            && safe(home - 1)
        {
            out.push(Move::new(from, Square::from_index(home - 2), None));
        }
    }

    /// Applies a move without a legality check. The destination of the king
    /// is still tested by the caller in `legal_moves`.
    pub(crate) fn make_move_unchecked(&self, m: Move) -> Position {
        let mut next = self.clone();
        let us = self.side_to_move;
        let piece = self.board[m.from.index()].expect("move from an occupied square");
        let captured = self.board[m.to.index()];
        let mut reset_clock = piece.kind == PieceKind::Pawn || captured.is_some();

        next.board[m.from.index()] = None;
        next.board[m.to.index()] = Some(match m.promotion {
            Some(k) => Piece::new(k, us),
            None => piece,
        });

        if piece.kind == PieceKind::Pawn
            && self.en_passant == Some(m.to)
            && captured.is_none()
            && m.from.file() != m.to.file()
        {
            let victim = Square::new(m.to.file(), m.from.rank()).unwrap();
            next.board[victim.index()] = None;
            reset_clock = true;
        }
        if piece.kind == PieceKind::King && (m.to.file() - m.from.file()).abs() == 2 {
            let (rook_from, rook_to) = if m.to.file() == 6 {
                (m.from.index() + 3, m.from.index() + 1)
            } else {
                (m.from.index() - 4, m.from.index() - 1)
            };
            next.board[rook_to] = next.board[rook_from].take();
        }

        next.castling.touch(m.from);
        next.castling.touch(m.to);
        next.en_passant = None;
        if piece.kind == PieceKind::Pawn && (m.to.rank() - m.from.rank()).abs() == 2 {
            next.en_passant = Square::new(m.from.file(), (m.from.rank() + m.to.rank()) / 2);
        }
        next.halfmove_clock = if reset_clock {
            0
        } else {
            self.halfmove_clock + 1
        };
        if us == Color::Black {
            next.fullmove_number += 1;
        }
        next.side_to_move = us.opposite();
        next
    }

    /// All legal moves, sorted in UCI string order.
    pub fn legal_moves(&self) -> Vec<Move> {
        let mut pseudo = Vec::with_capacity(64);
        self.pseudo_legal(&mut pseudo);
        let us = self.side_to_move;
        let mut legal: Vec<Move> = pseudo
            .into_iter()
            .filter(|&m| {
                let next = self.make_move_unchecked(m);
                !next.is_attacked(next.king_square(us), us.opposite())
            })
            .collect();
        legal.sort_unstable();
        legal
    }

    /// Applies a legal move. Positions past the 150-ply clock limit are
    /// reported as invalid rather than constructed.
    pub fn apply_move(&self, m: Move) -> Result<Position, ChessError> {
        if !self.legal_moves().contains(&m) {
            return Err(ChessError::IllegalMove {
                mv: m.to_uci(),
                fen: self.to_fen(),
            });
        }
        let next = self.make_move_unchecked(m);
        if next.halfmove_clock > super::position::MAX_HALFMOVE_CLOCK {
            return Err(ChessError::InvalidPosition(format!(
                "halfmove clock would exceed {} after {m}",
                super::position::MAX_HALFMOVE_CLOCK
            )));
        }
        Ok(next)
    }

    /// Parses a UCI move and applies it.
    pub fn apply_uci(&self, uci: &str) -> Result<Position, ChessError> {
        self.apply_move(uci.parse()?)
    }

    /// The legal-move-preserving null move: side flipped, en passant cleared.
    /// Returns the legal replies of the opponent, as used for threat concepts.
    pub fn opponent_replies(&self) -> Vec<Move> {
        self.null_move().legal_moves()
    }
}

fn perft_serial(pos: &Position, depth: u32) -> u64 {
    if depth == 0 {
        return 1;
    }
    let moves = pos.legal_moves();
    if depth == 1 {
        return moves.len() as u64;
    }
    moves
        .iter()
        .map(|&m| perft_serial(&pos.make_move_unchecked(m), depth - 1))
        .sum()
}

/// Leaf-node count of the legal move tree to `depth`. The root moves are
/// split across workers under [`Exec::Parallel`].
pub fn perft(pos: &Position, depth: u32, exec: Exec) -> u64 {
    if depth <= 1 {
        return perft_serial(pos, depth);
    }
    let moves = pos.legal_moves();
    par::map(exec, &moves, |&m| perft_serial(&pos.make_move_unchecked(m), depth - 1))
        .into_iter()
        .sum()
}
