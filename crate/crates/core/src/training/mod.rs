//! Teachers, corpus generation, distillation training, lambda sweeps and
//! puzzle evaluation.

mod config;
mod corpus;
mod dataset;
mod puzzles;
mod teacher;
mod train;

use thiserror::Error;

pub use config::{TrainRunConfig, ENV_PREFIX, KEYS};
pub use corpus::{generate_corpus, generate_games, play_game, Game, FIFTY_MOVE_CLOCK, SAMPLED_PLIES};
pub use dataset::{
    build_distill_dataset, build_from_games, export_teacher_policies, import_teacher_policies, DistillDataset,
    DistillRecord, IMPORT_SUM_TOLERANCE, TEACHER_SUM_TOLERANCE,
};
pub use puzzles::{eval_puzzles, load_puzzles, PuzzleCase, PuzzleReport, PuzzleResult, SkippedPuzzle};
pub use teacher::{
    heuristic_teacher, material_delta, move_score, softmax, HeuristicTeacher, Teacher, TeacherOutput,
    MOBILITY_WEIGHT,
};
pub use train::{
    checkpoint_name, evaluate_heldout, is_heldout, lambda_sweep, resume_distill, split_heldout, train_distill,
    EvalLog, LambdaRow, StepLog, TrainOutcome,
};

use crate::autodiff::AutodiffError;
use crate::chess::ChessError;
use crate::network::checkpoint::CheckpointError;
use crate::network::NetworkError;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Chess(#[from] ChessError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("position has no legal moves: {0}")]
    Terminal(String),
    #[error("teacher policy for {fen} sums to {sum}")]
    Unnormalized { fen: String, sum: f64 },
    #[error("teacher lists illegal move {uci} for {fen}")]
    IllegalMove { fen: String, uci: String },
    #[error("line {line}: {msg}")]
    Import { line: usize, msg: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("empty {0}")]
    EmptyDataset(&'static str),
}

impl From<AutodiffError> for TrainingError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFiniteGradient(name) => TrainingError::NonFiniteGradient(name),
            other => TrainingError::Network(NetworkError::Autodiff(other)),
        }
    }
}
