use super::{CastlingRights, ChessError, Color, Piece, Position, Square};

pub const START_FEN: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";

fn err(field: &'static str, detail: impl Into<String>) -> ChessError {
    ChessError::Fen {
        field,
        detail: detail.into(),
    }
}

impl Position {
    pub fn from_fen(text: &str) -> Result<Position, ChessError> {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(
                "field count",
                format!("expected 6 whitespace-separated fields, found {}", fields.len()),
            ));
        }

        let mut board = [None; 64];
        let ranks: Vec<&str> = fields[0].split('/').collect();
        if ranks.len() != 8 {
            return Err(err("placement", format!("expected 8 ranks, found {}", ranks.len())));
        }
        for (i, row) in ranks.iter().enumerate() {
            let rank = 7 - i as i32;
            let mut file = 0i32;
            for c in row.chars() {
                if let Some(d) = c.to_digit(10) {
                    if !(1..=8).contains(&d) {
                        return Err(err("placement", format!("bad empty-run digit {c:?}")));
                    }
                    file += d as i32;
                } else if let Some(p) = Piece::from_fen_char(c) {
                    let sq = Square::new(file, rank)
                        .ok_or_else(|| err("placement", format!("rank {} overflows", rank + 1)))?;
                    board[sq.index()] = Some(p);
                    file += 1;
                } else {
                    return Err(err("placement", format!("illegal character {c:?}")));
                }
                if file > 8 {
                    return Err(err("placement", format!("rank {} overflows", rank + 1)));
                }
            }
            if file != 8 {
                return Err(err("placement", format!("rank {} has {file} squares", rank + 1)));
            }
        }

        let side_to_move = match fields[1] {
            "w" => Color::White,
            "b" => Color::Black,
            s => return Err(err("side to move", format!("expected w or b, found {s:?}"))),
        };

        let mut castling = CastlingRights::default();
        if fields[2] != "-" {
            for c in fields[2].chars() {
                let slot = match c {
                    'K' => &mut castling.white_king,
                    'Q' => &mut castling.white_queen,
                    'k' => &mut castling.black_king,
                    'q' => &mut castling.black_queen,
                    _ => return Err(err("castling", format!("illegal character {c:?}"))),
                };
                if *slot {
                    return Err(err("castling", format!("duplicate {c:?}")));
                }
                *slot = true;
            }
        }

        let en_passant = match fields[3] {
            "-" => None,
            s => Some(
                s.parse::<Square>()
                    .map_err(|_| err("en passant", format!("bad square {s:?}")))?,
            ),
        };

        let halfmove_clock: u32 = fields[4]
            .parse()
            .map_err(|_| err("halfmove clock", format!("not a non-negative integer: {:?}", fields[4])))?;
        let fullmove_number: u32 = fields[5]
            .parse()
            .map_err(|_| err("fullmove number", format!("not a positive integer: {:?}", fields[5])))?;

        Position::from_parts(
            board,
            side_to_move,
            castling,
            en_passant,
            halfmove_clock,
            fullmove_number,
        )
    }

    pub fn to_fen(&self) -> String {
        let mut out = String::with_capacity(90);
        for rank in (0..8).rev() {
            let mut empty = 0;
            for file in 0..8 {
                match self.board[Square::new(file, rank).unwrap().index()] {
                    None => empty += 1,
                    Some(p) => {
                        if empty > 0 {
                            out.push(char::from_digit(empty, 10).unwrap());
                            empty = 0;
                        }
                        out.push(p.fen_char());
                    }
                }
            }
            if empty > 0 {
                out.push(char::from_digit(empty, 10).unwrap());
            }
            if rank > 0 {
                out.push('/');
            }
        }
        out.push(' ');
        out.push(match self.side_to_move {
            Color::White => 'w',
            Color::Black => 'b',
        });
        out.push(' ');
        let c = self.castling;
        let mut any = false;
        for (flag, ch) in [
            (c.white_king, 'K'),
            (c.white_queen, 'Q'),
            (c.black_king, 'k'),
            (c.black_queen, 'q'),
        ] {
            if flag {
                out.push(ch);
                any = true;
            }
        }
        if !any {
            out.push('-');
        }
        out.push(' ');
        match self.en_passant {
            Some(sq) => out.push_str(&sq.to_string()),
            None => out.push('-'),
        }
        out.push_str(&format!(" {} {}", self.halfmove_clock, self.fullmove_number));
        out
    }
}

impl std::str::FromStr for Position {
    type Err = ChessError;

    fn from_str(s: &str) -> Result<Position, ChessError> {
        Position::from_fen(s)
    }
}
