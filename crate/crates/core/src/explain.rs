//! Explanations of single positions: top moves, value, the keep-probability
//! map P and its per-square collapse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{Position, Square};
use crate::encoding::encode_position;
use crate::network::{
    collapse_visualization, index_move, mask_to_board_frame, masked_forward_with_probabilities, masker_forward,
    model_forward, support_indices, MaskerNet, ModelOutput, NetworkError, PolicyValueNet,
};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("position has no legal moves ({0})")]
    Terminal(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveProb {
    pub uci: String,
    pub p: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub fen: String,
    /// Most probable moves, probability descending (ties in UCI order).
    pub policy: Vec<MoveProb>,
    pub legal_moves: usize,
    pub best_move: String,
    pub value: Option<f32>,
    /// `[rank][file][channel]`, rank 0 = first rank, channels white
    /// P N B R Q K then black P N B R Q K.
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f32>>>,
    /// `[rank][file]` collapse of P.
    pub collapsed: Vec<Vec<f32>>,
    /// The sampled binary mask, same layout as P, when the prediction was
    /// made on a masked input.
    #[serde(rename = "P_bin", skip_serializing_if = "Option::is_none")]
    pub p_bin: Option<Vec<Vec<Vec<f32>>>>,
}

impl Explanation {
    pub fn prob_of(&self, uci: &str) -> Option<f32> {
        self.policy.iter().find(|m| m.uci == uci).map(|m| m.p)
    }
}

fn ranked(out: &ModelOutput, support: &[u32], pos: &Position) -> Vec<MoveProb> {
    let mover = pos.side_to_move();
    let mut moves: Vec<(crate::chess::Move, f32)> = support
        .iter()
        .map(|&i| (index_move(i as usize, mover), out.policy[i as usize]))
        .collect();
    moves.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    moves
        .into_iter()
        .map(|(m, p)| MoveProb { uci: m.to_string(), p })
        .collect()
}

/// Full ranked move list plus the explanation fields.
pub fn explain_all_moves(
    net: &PolicyValueNet,
    masker: &MaskerNet,
    pos: &Position,
    sample_seed: Option<u64>,
) -> Result<Explanation, ExplainError> {
    let support = support_indices(pos);
    if support.is_empty() {
        let why = if pos.is_checkmate() { "checkmate" } else { "stalemate" };
        return Err(ExplainError::Terminal(why.to_string()));
    }
    let input = encode_position(pos, &net.config.encoding).map_err(NetworkError::from)?;
    let masker_input = encode_position(pos, &masker.config.encoding).map_err(NetworkError::from)?;
    let p = masker_forward(masker, &masker_input)?;
    let mover = pos.side_to_move();
    let (out, p_bin) = match sample_seed {
        Some(seed) => {
            let mut rng = crate::rng::stream(seed, 0);
            let (out, mo) = masked_forward_with_probabilities(net, &input, p.clone(), &support, &mut rng)?;
            (out, Some(mask_to_board_frame(&mo.p_bin, mover)))
        }
        None => (model_forward(net, &input, &support)?, None),
    };
    let policy = ranked(&out, &support, pos);
    let collapsed = collapse_visualization(&p, pos)?;
    Ok(Explanation {
        fen: pos.to_fen(),
        best_move: policy[0].uci.clone(),
        legal_moves: support.len(),
        policy,
        value: out.value,
        p: mask_to_board_frame(&p, mover),
        collapsed: collapsed.iter().map(|r| r.to_vec()).collect(),
        p_bin,
    })
}

/// Explains `pos` keeping the `top_k` most probable moves. Without a seed
/// the prediction uses the unmasked input and P is reported alongside;
/// with a seed a mask is sampled from P and the prediction sees only the
/// kept entries.
pub fn explain_position(
    net: &PolicyValueNet,
    masker: &MaskerNet,
    pos: &Position,
    top_k: usize,
    sample_seed: Option<u64>,
) -> Result<Explanation, ExplainError> {
    let mut e = explain_all_moves(net, masker, pos, sample_seed)?;
    e.policy.truncate(top_k.max(1));
    Ok(e)
}

/// Per-square difference of two collapsed maps (`b - a`).
pub fn collapsed_diff(a: &Explanation, b: &Explanation) -> Vec<Vec<f32>> {
    a.collapsed
        .iter()
        .zip(&b.collapsed)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| y - x).collect())
        .collect()
}

/// A position and a variant with one piece moved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub relocated_from: String,
    pub relocated_to: String,
    pub original: Explanation,
    pub variant: Explanation,
    /// `variant.collapsed - original.collapsed`.
    pub diff: Vec<Vec<f32>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterfactualError {
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("cannot build variant: {0}")]
    Variant(String),
}

/// Explains `pos` and the variant with the piece on `from` moved to `to`.
pub fn counterfactual_pair(
    net: &PolicyValueNet,
    masker: &MaskerNet,
    pos: &Position,
    from: Square,
    to: Square,
    top_k: usize,
) -> Result<CounterfactualReport, CounterfactualError> {
    let variant = pos
        .with_piece_relocated(from, to)
        .map_err(|e| CounterfactualError::Variant(e.to_string()))?;
    let original = explain_position(net, masker, pos, top_k, None)?;
    let variant = explain_position(net, masker, &variant, top_k, None)?;
    let diff = collapsed_diff(&original, &variant);
    Ok(CounterfactualReport {
        relocated_from: from.to_string(),
        relocated_to: to.to_string(),
        original,
        variant,
        diff,
    })
}
