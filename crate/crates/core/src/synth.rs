//! Synthetic game generators: uniformly random legal play, and a scripted
//! "teacher" whose moves follow local shape so that a network can learn
//! them. Used for tests, benchmarks and desk-scale training corpora.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::goban::{Color, GameRecord, Move, Position, Winner, DEFAULT_KOMI};

pub trait MovePolicy {
    fn choose(&mut self, position: &Position) -> Move;
}

/// True if `point` is empty and every orthogonal neighbour is `color`.
pub fn is_simple_eye(position: &Position, point: usize, color: Color) -> bool {
    let b = position.board();
    b.get(point).is_none() && b.neighbors(point).all(|q| b.get(q) == Some(color))
}

/// Random legal point move that does not fill one of the mover's own eyes.
pub fn random_move<R: Rng>(position: &Position, rng: &mut R) -> Move {
    let n = position.size();
    let me = position.to_move();
    let mut empties: Vec<usize> = (0..n * n).filter(|&p| position.board().get(p).is_none()).collect();
    empties.shuffle(rng);
    empties
        .into_iter()
        .map(|p| Move::from_index(p, n))
        .find(|&m| !is_simple_eye(position, m.index(n).unwrap(), me) && position.is_legal(m))
        .unwrap_or(Move::Pass)
}

pub struct RandomPolicy<R> {
    pub rng: R,
}

impl<R: Rng> MovePolicy for RandomPolicy<R> {
    fn choose(&mut self, position: &Position) -> Move {
        random_move(position, &mut self.rng)
    }
}

/// Scripted player: captures ataried opponent strings, rescues its own
/// ataried strings, otherwise answers next to the opponent's last move in a
/// fixed preference order. A fraction of moves are random.
pub struct TeacherPolicy<R> {
    pub rng: R,
    pub noise: f64,
}

const RESPONSE_OFFSETS: [(isize, isize); 8] = [(-1, 1), (1, 1), (1, -1), (-1, -1), (0, 2), (2, 0), (0, -2), (-2, 0)];

impl<R: Rng> TeacherPolicy<R> {
    fn scripted(&self, position: &Position) -> Option<Move> {
        let b = position.board();
        let n = position.size();
        let me = position.to_move();
        let legal = |p: usize| {
            let m = Move::from_index(p, n);
            (b.get(p).is_none() && !is_simple_eye(position, p, me) && position.is_legal(m)).then_some(m)
        };
        let strings = b.strings();
        // Largest capturable opponent string first.
        let mut targets: Vec<_> = strings.iter().filter(|s| s.color != me && s.liberties.len() == 1).collect();
        targets.sort_by_key(|s| (std::cmp::Reverse(s.stones.len()), s.stones[0]));
        if let Some(m) = targets.iter().find_map(|s| legal(s.liberties[0])) {
            return Some(m);
        }
        let mut own: Vec<_> = strings.iter().filter(|s| s.color == me && s.liberties.len() == 1).collect();
        own.sort_by_key(|s| (std::cmp::Reverse(s.stones.len()), s.stones[0]));
        for s in own {
            let lib = s.liberties[0];
            if legal(lib).is_some() {
                if let Ok(next) = position.play(Move::from_index(lib, n)) {
                    if next.board().liberty_count(lib, 2) >= 2 {
                        return Some(Move::from_index(lib, n));
                    }
                }
            }
        }
        let last = position.last_move()?.index(n)?;
        let (r, c) = ((last / n) as isize, (last % n) as isize);
        RESPONSE_OFFSETS.iter().find_map(|&(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                return None;
            }
            legal(rr as usize * n + cc as usize)
        })
    }
}

impl<R: Rng> MovePolicy for TeacherPolicy<R> {
    fn choose(&mut self, position: &Position) -> Move {
        if self.rng.gen_bool(self.noise) {
            return random_move(position, &mut self.rng);
        }
        match self.scripted(position) {
            Some(m) => m,
            None => random_move(position, &mut self.rng),
        }
    }
}

/// Plays a game to two passes (or `max_moves`) and scores it Tromp-Taylor.
pub fn play_game<P: MovePolicy>(size: usize, policy: &mut P, max_moves: usize) -> GameRecord {
    let mut pos = Position::new(size).expect("valid size");
    let mut moves = Vec::new();
    while !pos.is_over() && moves.len() < max_moves {
        let m = policy.choose(&pos);
        pos = pos.play(m).expect("policies only play legal moves");
        moves.push(m);
    }
    GameRecord {
        size,
        result: Winner::from_score(pos.tromp_taylor_score(DEFAULT_KOMI)),
        moves,
        komi: DEFAULT_KOMI,
    }
}

/// Uniformly random legal game.
pub fn random_game<R: Rng>(size: usize, rng: &mut R) -> GameRecord {
    let mut policy = RandomPolicy { rng };
    play_game(size, &mut policy, 3 * size * size)
}

pub fn teacher_game<R: Rng>(size: usize, noise: f64, rng: &mut R) -> GameRecord {
    let mut policy = TeacherPolicy { rng, noise };
    play_game(size, &mut policy, 3 * size * size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_games_replay_and_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = random_game(9, &mut rng);
            let positions = g.replay().expect("legal");
            assert!(g.moves.len() > 20);
            assert!(positions.last().unwrap().is_over() || g.moves.len() == 243);
        }
    }

    #[test]
    fn teacher_is_deterministic_under_seed() {
        let a = teacher_game(9, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        let b = teacher_game(9, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.replay().is_ok());
    }
}
