//! Policy/value network, the masking network, their composition, the
//! distillation objective and the per-square collapse of a mask.

pub mod checkpoint;
mod masker;
mod model;
pub mod policy_index;

use rand::Rng;
use thiserror::Error;

pub use masker::{MaskerConfig, MaskerNet};
pub use model::{ModelConfig, ModelOutput, NetNodes, PolicyValueNet};
pub use policy_index::{index_move, move_index, support_indices, POLICY_SIZE};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::chess::{Color, Piece, Position};
use crate::encoding::{oriented_row, piece_channel, EncodingError, PlaneStack, PIECE_PLANES};

/// Tolerance on the total mass of a teacher distribution.
pub const TEACHER_SUM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("no legal moves to predict over")]
    EmptySupport,
    #[error("teacher policy in row {row} sums to {sum}, not 1")]
    UnnormalizedTeacher { row: usize, sum: f32 },
    #[error("mask shape {0:?} is not [8, 8, 12]")]
    MaskShape(Vec<usize>),
}

/// Stacks plane stacks into a `[batch, 8, 8, C]` tensor.
pub fn batch_input(inputs: &[&PlaneStack]) -> Result<Tensor, NetworkError> {
    let Some(first) = inputs.first() else {
        return Err(NetworkError::InputShape {
            expected: vec![8, 8],
            got: vec![0],
        });
    };
    let c = first.channels();
    let mut data = Vec::with_capacity(inputs.len() * 64 * c);
    for ps in inputs {
        if ps.channels() != c || ps.data.len() != 64 * c {
            return Err(NetworkError::InputShape {
                expected: vec![8, 8, c],
                got: vec![8, 8, ps.channels()],
            });
        }
        data.extend_from_slice(&ps.data);
    }
    Ok(Tensor::new(&[inputs.len(), 8, 8, c], data))
}

/// Evaluates the network on one input.
pub fn model_forward(
    net: &PolicyValueNet,
    input: &PlaneStack,
    support: &[u32],
) -> Result<ModelOutput, NetworkError> {
    if support.is_empty() {
        return Err(NetworkError::EmptySupport);
    }
    let mut out = net.forward_batch(&[input], &[support.to_vec()])?;
    Ok(out.pop().expect("one output per input"))
}

/// Keep-probabilities for the twelve piece planes, `[8, 8, 12]`.
pub fn masker_forward(masker: &MaskerNet, input: &PlaneStack) -> Result<Tensor, NetworkError> {
    masker.probabilities(input)
}

/// Draws `X ~ U(0, 1]` per entry and returns `H(P - X)`, so each entry is 1
/// with probability `P`. Entries with `P = 0` are never kept and entries
/// with `P = 1` always are.
pub fn binarize<R: Rng>(p: &Tensor, rng: &mut R) -> Tensor {
    let data = p
        .data()
        .iter()
        .map(|&pi| {
            let x = 1.0 - rng.random::<f32>();
            if pi - x >= 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(p.shape(), data)
}

/// Uniform noise in `(0, 1]` shaped like `p`, for recording `H(P - X)` on a graph.
pub fn mask_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 1.0 - rng.random::<f32>()).collect())
}

/// Multiplies the current position's twelve piece planes by `p_bin`
/// (`[8, 8, 12]`); every other plane is copied unchanged. Masked entries
/// become exactly `+0.0`.
pub fn apply_mask(input: &PlaneStack, p_bin: &Tensor) -> Result<PlaneStack, NetworkError> {
    if p_bin.len() != 64 * PIECE_PLANES {
        return Err(NetworkError::MaskShape(p_bin.shape().to_vec()));
    }
    let c = input.channels();
    let mut out = input.clone();
    for (cell, m) in out
        .data
        .chunks_exact_mut(c)
        .zip(p_bin.data().chunks_exact(PIECE_PLANES))
    {
        for (v, &mi) in cell[..PIECE_PLANES].iter_mut().zip(m) {
            *v = if mi == 0.0 { 0.0 } else { *v * mi };
        }
    }
    Ok(out)
}

/// Mask probabilities, one sampled binary mask, and its per-square view.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskerOutput {
    pub p: Tensor,
    pub p_bin: Tensor,
    /// `[rank][file]` in board coordinates (rank 0 is the first rank).
    pub collapsed: [[f32; 8]; 8],
}

/// Masked evaluation with a given probability map.
pub fn masked_forward_with_probabilities<R: Rng>(
    net: &PolicyValueNet,
    input: &PlaneStack,
    p: Tensor,
    support: &[u32],
    rng: &mut R,
) -> Result<(ModelOutput, MaskerOutput), NetworkError> {
    if p.len() != 64 * PIECE_PLANES {
        return Err(NetworkError::MaskShape(p.shape().to_vec()));
    }
    let p_bin = binarize(&p, rng);
    let masked = apply_mask(input, &p_bin)?;
    let out = model_forward(net, &masked, support)?;
    let placement = crate::encoding::decode_piece_planes(input)?;
    let collapsed = collapse_board(&p_bin, &placement.board, placement.side_to_move);
    Ok((out, MaskerOutput { p, p_bin, collapsed }))
}

/// Runs the masker, samples a mask, and evaluates the network on the masked
/// input only.
pub fn masked_forward<R: Rng>(
    masker: &MaskerNet,
    net: &PolicyValueNet,
    input: &PlaneStack,
    support: &[u32],
    rng: &mut R,
) -> Result<(ModelOutput, MaskerOutput), NetworkError> {
    let p = masker_forward(masker, input)?;
    masked_forward_with_probabilities(net, input, p, support, rng)
}

/// Records the distillation objective: mean cross-entropy against the
/// teacher distributions plus `lambda_mask` times the per-sample sum of `P`
/// (averaged over the batch).
pub fn distill_loss(
    g: &mut Graph,
    policy: NodeId,
    teacher: &[Vec<(u32, f32)>],
    p: NodeId,
    lambda_mask: f32,
) -> Result<NodeId, NetworkError> {
    for (row, t) in teacher.iter().enumerate() {
        let sum: f64 = t.iter().map(|&(_, v)| v as f64).sum();
        if (sum - 1.0).abs() > TEACHER_SUM_TOLERANCE as f64 {
            return Err(NetworkError::UnnormalizedTeacher {
                row,
                sum: sum as f32,
            });
        }
    }
    let batch = teacher.len().max(1) as f32;
    let ce = g.cross_entropy(policy, teacher)?;
    let ce = g.mean(ce);
    let l1 = g.l1_sum(p);
    let penalty = g.scale(l1, lambda_mask / batch);
    Ok(g.add(ce, penalty)?)
}

/// Per-square view of a `[8, 8, 12]` mask in encoding coordinates: an
/// occupied square shows the channel of its piece, an empty square the
/// largest of its twelve channels. Output is indexed `[rank][file]`.
pub fn collapse_visualization(mask: &Tensor, pos: &Position) -> Result<[[f32; 8]; 8], NetworkError> {
    if mask.len() != 64 * PIECE_PLANES {
        return Err(NetworkError::MaskShape(mask.shape().to_vec()));
    }
    Ok(collapse_board(mask, pos.board(), pos.side_to_move()))
}

fn collapse_board(mask: &Tensor, board: &[Option<Piece>; 64], mover: Color) -> [[f32; 8]; 8] {
    let mut out = [[0.0f32; 8]; 8];
    let m = mask.data();
    for (idx, cell) in board.iter().enumerate() {
        let sq = crate::chess::Square::from_index(idx);
        let row = oriented_row(sq, mover);
        let base = (row * 8 + sq.file() as usize) * PIECE_PLANES;
        let channels = &m[base..base + PIECE_PLANES];
        out[sq.rank() as usize][sq.file() as usize] = match cell {
            Some(piece) => channels[piece_channel(*piece, mover)],
            None => channels.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        };
    }
    out
}

/// Re-expresses a `[8, 8, 12]` mask in board coordinates:
/// `[rank][file][color * 6 + kind]` with white first.
pub fn mask_to_board_frame(mask: &Tensor, mover: Color) -> Vec<Vec<Vec<f32>>> {
    let m = mask.data();
    (0..8)
        .map(|rank| {
            (0..8)
                .map(|file| {
                    let sq = crate::chess::Square::new(file as i32, rank).unwrap();
                    let base = (oriented_row(sq, mover) * 8 + file) * PIECE_PLANES;
                    let own = &m[base..base + 6];
                    let opp = &m[base + 6..base + 12];
                    match mover {
                        Color::White => own.iter().chain(opp).copied().collect(),
                        Color::Black => opp.iter().chain(own).copied().collect(),
                    }
                })
                .collect()
        })
        .collect()
}
