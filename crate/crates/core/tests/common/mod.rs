//! Slow, independent chess rules used as an oracle by the integration tests.
//! Shares no code with the library: boards are byte arrays of FEN letters and
//! moves are found by trying every (from, to) pair.

#![allow(dead_code)]

pub mod gradcheck;
pub mod masking;
pub mod probes;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iimap::chess::Position;

#[derive(Clone, Debug)]
pub struct Board {
    /// index rank * 8 + file; b'.' is empty.
    sq: [u8; 64],
    white: bool,
    /// K Q k q
    castle: [bool; 4],
    ep: Option<usize>,
    half: u32,
    full: u32,
}

fn is_white(p: u8) -> bool {
    p.is_ascii_uppercase()
}

fn name(i: usize) -> String {
    format!("{}{}", (b'a' + (i % 8) as u8) as char, i / 8 + 1)
}

impl Board {
    pub fn parse(fen: &str) -> Board {
        let f: Vec<&str> = fen.split_whitespace().collect();
        let mut sq = [b'.'; 64];
        for (r, row) in f[0].split('/').enumerate() {
            let rank = 7 - r;
            let mut file = 0;
            for c in row.bytes() {
                if c.is_ascii_digit() {
                    file += (c - b'0') as usize;
                } else {
                    sq[rank * 8 + file] = c;
                    file += 1;
                }
            }
        }
        let castle = [f[2].contains('K'), f[2].contains('Q'), f[2].contains('k'), f[2].contains('q')];
        let ep = (f[3] != "-").then(|| {
            let b = f[3].as_bytes();
            (b[1] - b'1') as usize * 8 + (b[0] - b'a') as usize
        });
        Board {
            sq,
            white: f[1] == "w",
            castle,
            ep,
            half: f[4].parse().unwrap(),
            full: f[5].parse().unwrap(),
        }
    }

    pub fn fen(&self) -> String {
        let mut s = String::new();
        for rank in (0..8).rev() {
            let mut empty = 0;
            for file in 0..8 {
                let p = self.sq[rank * 8 + file];
                if p == b'.' {
                    empty += 1;
                } else {
                    if empty > 0 {
                        s.push_str(&empty.to_string());
                        empty = 0;
                    }
                    s.push(p as char);
                }
            }
            if empty > 0 {
                s.push_str(&empty.to_string());
            }
            if rank > 0 {
                s.push('/');
            }
        }
        let castle: String = "KQkq"
            .chars()
            .zip(self.castle)
            .filter(|&(_, on)| on)
            .map(|(c, _)| c)
            .collect();
        format!(
            "{s} {} {} {} {} {}",
            if self.white { 'w' } else { 'b' },
            if castle.is_empty() { "-".to_string() } else { castle },
            self.ep.map_or("-".to_string(), name),
            self.half,
            self.full
        )
    }

    fn own(&self, i: usize) -> bool {
        self.sq[i] != b'.' && is_white(self.sq[i]) == self.white
    }

    fn path_clear(&self, from: usize, to: usize) -> bool {
        let (fr, ff) = ((from / 8) as i32, (from % 8) as i32);
        let (tr, tf) = ((to / 8) as i32, (to % 8) as i32);
        let (dr, df) = ((tr - fr).signum(), (tf - ff).signum());
        let (mut r, mut f) = (fr + dr, ff + df);
        while (r, f) != (tr, tf) {
            if self.sq[(r * 8 + f) as usize] != b'.' {
                return false;
            }
            r += dr;
            f += df;
        }
        true
    }

    /// Whether the piece on `from` attacks `to` (ignoring what stands there).
    fn attacks(&self, from: usize, to: usize) -> bool {
        let p = self.sq[from];
        let dr = (to / 8) as i32 - (from / 8) as i32;
        let df = (to % 8) as i32 - (from % 8) as i32;
        if dr == 0 && df == 0 {
            return false;
        }
        match p.to_ascii_lowercase() {
            b'p' => {
                let fwd = if is_white(p) { 1 } else { -1 };
                dr == fwd && df.abs() == 1
            }
            b'n' => (dr.abs(), df.abs()) == (1, 2) || (dr.abs(), df.abs()) == (2, 1),
            b'k' => dr.abs() <= 1 && df.abs() <= 1,
            b'r' => (dr == 0 || df == 0) && self.path_clear(from, to),
            b'b' => dr.abs() == df.abs() && self.path_clear(from, to),
            b'q' => (dr == 0 || df == 0 || dr.abs() == df.abs()) && self.path_clear(from, to),
            _ => false,
        }
    }

    pub fn attacked_by(&self, target: usize, white: bool) -> bool {
        (0..64).any(|i| self.sq[i] != b'.' && is_white(self.sq[i]) == white && self.attacks(i, target))
    }

    fn king(&self, white: bool) -> usize {
        let k = if white { b'K' } else { b'k' };
        (0..64).find(|&i| self.sq[i] == k).expect("king on board")
    }

    pub fn in_check(&self) -> bool {
        self.attacked_by(self.king(self.white), !self.white)
    }

    /// Candidate moves as (from, to, promotion letter), before the king-safety
    /// filter.
    fn candidates(&self) -> Vec<(usize, usize, Option<u8>)> {
        let mut out = Vec::new();
        for from in 0..64 {
            if !self.own(from) {
                continue;
            }
            let p = self.sq[from].to_ascii_lowercase();
            for to in 0..64 {
                if self.own(to) {
                    continue;
                }
                let ok = if p == b'p' {
                    self.pawn_ok(from, to)
                } else if p == b'k' && (to as i32 - from as i32).abs() == 2 && from % 8 == 4 {
                    self.castle_ok(from, to)
                } else {
                    self.attacks(from, to)
                };
                if !ok {
                    continue;
                }
                let last = if self.white { 7 } else { 0 };
                if p == b'p' && to / 8 == last {
                    for promo in [b'n', b'b', b'r', b'q'] {
                        out.push((from, to, Some(promo)));
                    }
                } else {
                    out.push((from, to, None));
                }
            }
        }
        out
    }

    fn pawn_ok(&self, from: usize, to: usize) -> bool {
        let fwd: i32 = if self.white { 1 } else { -1 };
        let dr = (to / 8) as i32 - (from / 8) as i32;
        let df = (to % 8) as i32 - (from % 8) as i32;
        let start = if self.white { 1 } else { 6 };
        if df == 0 {
            if dr == fwd {
                return self.sq[to] == b'.';
            }
            if dr == 2 * fwd && from / 8 == start {
                let mid = (from as i32 + 8 * fwd) as usize;
                return self.sq[mid] == b'.' && self.sq[to] == b'.';
            }
            return false;
        }
        if df.abs() == 1 && dr == fwd {
            return self.sq[to] != b'.' || self.ep == Some(to);
        }
        false
    }

    fn castle_ok(&self, from: usize, to: usize) -> bool {
        let (king, rook, base) = if self.white { (b'K', b'R', 0) } else { (b'k', b'r', 56) };
        if self.sq[from] != king || from != base + 4 {
            return false;
        }
        let kingside = to > from;
        let right = self.castle[if self.white { 0 } else { 2 } + if kingside { 0 } else { 1 }];
        if !right {
            return false;
        }
        let (rook_sq, between, pass): (usize, Vec<usize>, [usize; 2]) = if kingside {
            (base + 7, vec![base + 5, base + 6], [base + 5, base + 6])
        } else {
            (base, vec![base + 1, base + 2, base + 3], [base + 3, base + 2])
        };
        self.sq[rook_sq] == rook
            && between.iter().all(|&i| self.sq[i] == b'.')
            && !self.attacked_by(from, !self.white)
            && pass.iter().all(|&i| !self.attacked_by(i, !self.white))
    }

    fn make(&self, from: usize, to: usize, promo: Option<u8>) -> Board {
        let mut b = self.clone();
        let p = self.sq[from];
        let lower = p.to_ascii_lowercase();
        let capture = self.sq[to] != b'.';
        b.sq[to] = match promo {
            Some(c) if self.white => c.to_ascii_uppercase(),
            Some(c) => c,
            None => p,
        };
        b.sq[from] = b'.';
        if lower == b'p' && Some(to) == self.ep {
            let victim = if self.white { to - 8 } else { to + 8 };
            b.sq[victim] = b'.';
        }
        if lower == b'k' && (to as i32 - from as i32).abs() == 2 {
            let (rf, rt) = if to > from { (from + 3, from + 1) } else { (from - 4, from - 1) };
            b.sq[rt] = b.sq[rf];
            b.sq[rf] = b'.';
        }
        b.ep = None;
        if lower == b'p' && (to as i32 - from as i32).abs() == 16 {
            b.ep = Some((from + to) / 2);
        }
        for (i, sq) in [(0usize, 7usize), (1, 0), (2, 63), (3, 56)] {
            if from == sq || to == sq {
                b.castle[i] = false;
            }
        }
        if lower == b'k' {
            let base = if self.white { 0 } else { 2 };
            b.castle[base] = false;
            b.castle[base + 1] = false;
        }
        b.half = if lower == b'p' || capture { 0 } else { self.half + 1 };
        if !self.white {
            b.full += 1;
        }
        b.white = !self.white;
        b
    }

    /// Legal moves as sorted UCI strings, each with its successor.
    pub fn successors(&self) -> Vec<(String, Board)> {
        let mut out: Vec<(String, Board)> = self
            .candidates()
            .into_iter()
            .filter_map(|(f, t, promo)| {
                let next = self.make(f, t, promo);
                let me = !next.white;
                if next.attacked_by(next.king(me), !me) {
                    return None;
                }
                let mut uci = format!("{}{}", name(f), name(t));
                if let Some(c) = promo {
                    uci.push(c as char);
                }
                Some((uci, next))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn legal_uci(&self) -> Vec<String> {
        self.successors().into_iter().map(|(m, _)| m).collect()
    }

    pub fn perft(&self, depth: u32) -> u64 {
        if depth == 0 {
            return 1;
        }
        let next = self.successors();
        if depth == 1 {
            return next.len() as u64;
        }
        next.iter().map(|(_, b)| b.perft(depth - 1)).sum()
    }

    fn count_non_king(&self, white: bool) -> usize {
        self.sq
            .iter()
            .filter(|&&p| p != b'.' && is_white(p) == white && p.to_ascii_lowercase() != b'k')
            .count()
    }

    fn doubled(&self, white: bool) -> bool {
        let pawn = if white { b'P' } else { b'p' };
        (0..8).any(|f| (0..8).filter(|r| self.sq[r * 8 + f] == pawn).count() >= 2)
    }

    fn captures_queen(&self, queen_white: bool) -> bool {
        let q = if queen_white { b'Q' } else { b'q' };
        self.successors().iter().any(|(m, _)| {
            let b = m.as_bytes();
            let to = (b[3] - b'1') as usize * 8 + (b[2] - b'a') as usize;
            self.sq[to] == q
        })
    }

    /// Concept labels by name, for every deterministic concept.
    pub fn concept(&self, name: &str) -> bool {
        match name {
            "has_mate_threat" => self
                .successors()
                .iter()
                .any(|(_, b)| b.in_check() && b.successors().is_empty()),
            "in_check" => self.in_check(),
            "material_advantage" => self.count_non_king(self.white) > self.count_non_king(!self.white),
            "threat_opp_queen" => self.captures_queen(!self.white),
            "has_own_double_pawn" => self.doubled(self.white),
            "has_opp_double_pawn" => self.doubled(!self.white),
            "has_contested_open_file" => (0..8).any(|f| {
                let col: Vec<u8> = (0..8).map(|r| self.sq[r * 8 + f]).collect();
                !col.iter().any(|&p| p == b'P' || p == b'p') && col.contains(&b'R') && col.contains(&b'r')
            }),
            "threat_my_queen" => {
                let mut flipped = self.clone();
                flipped.white = !self.white;
                flipped.ep = None;
                flipped.captures_queen(self.white)
            }
            other => panic!("no oracle for {other}"),
        }
    }
}

/// Positions reached by uniformly random legal play from the start, each
/// game 0..=max_plies long.
pub fn random_positions(n: usize, max_plies: usize, seed: u64) -> Vec<Position> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let plies = rng.random_range(0..=max_plies);
        let mut pos = Position::startpos();
        for _ in 0..plies {
            let moves = pos.legal_moves();
            let Some(&m) = moves.choose(&mut rng) else { break };
            pos = match pos.apply_move(m) {
                Ok(p) => p,
                Err(_) => break,
            };
        }
        out.push(pos);
    }
    out
}

/// Kiwipete and four other standard perft positions.
pub const EDGE_FENS: [&str; 5] = [
    "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1",
    "8/2p5/3p4/KP5r/1R3p1k/8/4P1P1/8 w - - 0 1",
    "r3k2r/Pppp1ppp/1b3nbN/nP6/BBP1P3/q4N2/Pp1P2PP/R2Q1RK1 w kq - 0 1",
    "rnbq1k1r/pp1Pbppp/2p5/8/2B5/8/PPP1NnPP/RNBQK2R w KQ - 1 8",
    "r4rk1/1pp1qppp/p1np1n2/2b1p1B1/2B1P1b1/P1NP1N2/1PP1QPPP/R4RK1 w - - 0 10",
];

/// (fen, depth, library count, oracle count) for the start position at
/// depths 1-4 and the edge positions at depths that keep the oracle fast.
pub fn perft_table() -> Vec<(String, u32, u64, u64)> {
    use iimap::chess::{perft, START_FEN};
    use iimap::par::Exec;
    let mut cases: Vec<(&str, u32)> = (1..=4).map(|d| (START_FEN, d)).collect();
    cases.extend([(EDGE_FENS[0], 3), (EDGE_FENS[1], 4), (EDGE_FENS[2], 3), (EDGE_FENS[3], 3), (EDGE_FENS[4], 3)]);
    cases
        .into_iter()
        .map(|(fen, d)| {
            let lib = perft(&Position::from_fen(fen).unwrap(), d, Exec::default());
            let oracle = Board::parse(fen).perft(d);
            (fen.to_string(), d, lib, oracle)
        })
        .collect()
}

/// Deterministic concepts checked against the oracle.
pub const ORACLE_CONCEPTS: [&str; 8] = [
    "has_mate_threat",
    "in_check",
    "material_advantage",
    "threat_opp_queen",
    "has_own_double_pawn",
    "has_opp_double_pawn",
    "has_contested_open_file",
    "threat_my_queen",
];

/// Per concept: (name, disagreements, positives) over `positions`.
pub fn concept_disagreements(positions: &[Position]) -> Vec<(&'static str, usize, usize)> {
    use iimap::probes::ConceptSpec;
    let boards: Vec<Board> = positions.iter().map(|p| Board::parse(&p.to_fen())).collect();
    ORACLE_CONCEPTS
        .iter()
        .map(|&name| {
            let spec = ConceptSpec::new(name.parse().unwrap());
            let mut bad = 0;
            let mut pos_count = 0;
            for (p, b) in positions.iter().zip(&boards) {
                let want = b.concept(name);
                pos_count += want as usize;
                bad += (spec.label(p) != want) as usize;
            }
            (name, bad, pos_count)
        })
        .collect()
}
