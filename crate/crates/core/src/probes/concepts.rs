use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chess::{Color, PieceKind, Position, Square};

/// The binary concepts a probe can be asked to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    HasMateThreat,
    InCheck,
    MaterialAdvantage,
    ThreatOppQueen,
    HasOwnDoublePawn,
    HasOppDoublePawn,
    HasContestedOpenFile,
    ThreatMyQueen,
    Random,
}

impl Concept {
    pub const ALL: [Concept; 9] = [
        Concept::HasMateThreat,
        Concept::InCheck,
        Concept::MaterialAdvantage,
        Concept::ThreatOppQueen,
        Concept::HasOwnDoublePawn,
        Concept::HasOppDoublePawn,
        Concept::HasContestedOpenFile,
        Concept::ThreatMyQueen,
        Concept::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Concept::HasMateThreat => "has_mate_threat",
            Concept::InCheck => "in_check",
            Concept::MaterialAdvantage => "material_advantage",
            Concept::ThreatOppQueen => "threat_opp_queen",
            Concept::HasOwnDoublePawn => "has_own_double_pawn",
            Concept::HasOppDoublePawn => "has_opp_double_pawn",
            Concept::HasContestedOpenFile => "has_contested_open_file",
            Concept::ThreatMyQueen => "threat_my_queen",
            Concept::Random => "random",
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unknown concept {0:?}")]
pub struct UnknownConcept(pub String);

impl FromStr for Concept {
    type Err = UnknownConcept;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Concept::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownConcept(s.to_string()))
    }
}

/// A concept plus the seed used by the random concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept: Concept,
    #[serde(default)]
    pub seed: u64,
}

impl ConceptSpec {
    pub fn new(concept: Concept) -> ConceptSpec {
        ConceptSpec { concept, seed: 0 }
    }

    pub fn label(&self, pos: &Position) -> bool {
        concept_label(self, pos)
    }
}

/// Deterministic 64-bit mix of a position hash with a seed.
pub(crate) fn mix(hash: u64, seed: u64) -> u64 {
    crate::rng::mix_seed(seed, hash)
}

fn doubled_pawns(pos: &Position, color: Color) -> bool {
    let mut per_file = [0u8; 8];
    for (sq, p) in pos.pieces() {
        if p.color == color && p.kind == PieceKind::Pawn {
            per_file[sq.file() as usize] += 1;
        }
    }
    per_file.iter().any(|&n| n >= 2)
}

fn contested_open_file(pos: &Position) -> bool {
    (0..8).any(|file| {
        let mut pawns = false;
        let mut rooks = [false; 2];
        for rank in 0..8 {
            if let Some(p) = pos.piece_at(Square::new(file, rank).unwrap()) {
                match p.kind {
                    PieceKind::Pawn => pawns = true,
                    PieceKind::Rook => rooks[p.color.index()] = true,
                    _ => {}
                }
            }
        }
        !pawns && rooks[0] && rooks[1]
    })
}

fn non_king_pieces(pos: &Position, color: Color) -> usize {
    pos.pieces()
        .filter(|(_, p)| p.color == color && p.kind != PieceKind::King)
        .count()
}

fn can_capture_queen(pos: &Position, moves: &[crate::chess::Move], victim: Color) -> bool {
    moves.iter().any(|m| {
        pos.piece_at(m.to)
            .is_some_and(|p| p.kind == PieceKind::Queen && p.color == victim)
    })
}

/// Evaluates one concept on a position. Every concept except `Random` is a
/// pure function of the position; `Random` is a seeded coin per position.
pub fn concept_label(spec: &ConceptSpec, pos: &Position) -> bool {
    let me = pos.side_to_move();
    let them = me.opposite();
    match spec.concept {
        Concept::HasMateThreat => pos
            .legal_moves()
            .into_iter()
            .any(|m| pos.apply_move(m).is_ok_and(|next| next.is_checkmate())),
        Concept::InCheck => pos.is_check(),
        Concept::MaterialAdvantage => non_king_pieces(pos, me) > non_king_pieces(pos, them),
        Concept::ThreatOppQueen => can_capture_queen(pos, &pos.legal_moves(), them),
        Concept::HasOwnDoublePawn => doubled_pawns(pos, me),
        Concept::HasOppDoublePawn => doubled_pawns(pos, them),
        Concept::HasContestedOpenFile => contested_open_file(pos),
        Concept::ThreatMyQueen => can_capture_queen(&pos.null_move(), &pos.opponent_replies(), me),
        Concept::Random => mix(pos.stable_hash(), spec.seed) & 1 == 1,
    }
}
