use std::collections::HashMap;

use rand::Rng;

use super::{Teacher, TrainingError};
use crate::chess::{Move, Position};
use crate::par::{self, Exec};

/// Plies played by sampling the teacher before switching to its argmax.
pub const SAMPLED_PLIES: usize = 20;
/// Games stop once the halfmove clock reaches this value.
pub const FIFTY_MOVE_CLOCK: u32 = 100;

/// The non-terminal positions of one game, in play order.
#[derive(Clone, Debug, PartialEq)]
pub struct Game {
    pub id: u32,
    pub positions: Vec<Position>,
}

fn repetition_key(pos: &Position) -> String {
    let fen = pos.to_fen();
    fen.rsplitn(3, ' ').nth(2).unwrap_or(&fen).to_string()
}

fn pick<R: Rng>(moves: &[(Move, f32)], sample: bool, rng: &mut R) -> Move {
    if sample {
        let x: f64 = rng.random();
        let mut acc = 0.0;
        for &(m, p) in moves {
            acc += p as f64;
            if x < acc {
                return m;
            }
        }
        moves.last().expect("non-empty").0
    } else {
        // First maximal move in UCI order.
        moves
            .iter()
            .fold(None::<(Move, f32)>, |best, &(m, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((m, p)),
            })
            .expect("non-empty")
            .0
    }
}

/// Plays one game from the start position.
pub fn play_game(teacher: &dyn Teacher, id: u32, max_plies: usize, seed: u64) -> Result<Game, TrainingError> {
    let mut rng = crate::rng::stream(seed, id as u64);
    let mut pos = Position::startpos();
    let mut seen: HashMap<String, u32> = HashMap::new();
    let mut positions = Vec::new();
    for ply in 0..max_plies {
        let count = seen.entry(repetition_key(&pos)).or_insert(0);
        *count += 1;
        if *count >= 3 || pos.halfmove_clock() >= FIFTY_MOVE_CLOCK {
            break;
        }
        if pos.legal_moves().is_empty() {
            break;
        }
        let out = teacher.evaluate(&pos)?;
        let m = pick(&out.moves, ply < SAMPLED_PLIES, &mut rng);
        positions.push(pos.clone());
        pos = pos.apply_move(m)?;
    }
    Ok(Game { id, positions })
}

/// Plays `n_games` games, each with its own seeded stream so the result
/// does not depend on `exec`.
pub fn generate_games(
    teacher: &dyn Teacher,
    n_games: usize,
    max_plies: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Game>, TrainingError> {
    if n_games == 0 {
        return Err(TrainingError::Config("n_games must be at least 1".into()));
    }
    par::map_range(exec, n_games, |i| play_game(teacher, i as u32, max_plies, seed))
        .into_iter()
        .collect()
}

/// Every non-terminal position visited by `n_games` teacher games.
pub fn generate_corpus(
    teacher: &dyn Teacher,
    n_games: usize,
    max_plies: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Position>, TrainingError> {
    Ok(generate_games(teacher, n_games, max_plies, seed, exec)?
        .into_iter()
        .flat_map(|g| g.positions)
        .collect())
}
