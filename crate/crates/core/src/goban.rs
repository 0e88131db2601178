//! Go rules: board representation, legality, captures, positional superko
//! and Tromp-Taylor area scoring.
//!
//! Points are addressed by a flat row-major index `row * size + col`, with
//! row 0 being the top row as rendered in SGF coordinates. The same index is
//! used by the encoder and by both policy heads.

use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

pub const MIN_SIZE: usize = 5;
pub const MAX_SIZE: usize = 19;
pub const DEFAULT_KOMI: f32 = 7.5;

/// Number of prior occupancy snapshots kept for the encoder's history planes.
pub const HISTORY_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Black,
    White,
}

impl Color {
    #[inline]
    pub fn opposite(self) -> Color {
        match self {
            Color::Black => Color::White,
            Color::White => Color::Black,
        }
    }

    #[inline]
    fn index(self) -> usize {
        match self {
            Color::Black => 0,
            Color::White => 1,
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Color::Black => write!(f, "B"),
            Color::White => write!(f, "W"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Move {
    Pass,
    Point { row: u8, col: u8 },
}

impl Move {
    pub fn at(row: usize, col: usize) -> Move {
        Move::Point {
            row: row as u8,
            col: col as u8,
        }
    }

    pub fn from_index(index: usize, size: usize) -> Move {
        Move::at(index / size, index % size)
    }

    /// Flat index of a point move, `None` for pass.
    pub fn index(self, size: usize) -> Option<usize> {
        match self {
            Move::Pass => None,
            Move::Point { row, col } => Some(row as usize * size + col as usize),
        }
    }

    /// Flat index with pass mapped to `size * size`, as stored in the cache.
    pub fn code(self, size: usize) -> usize {
        self.index(size).unwrap_or(size * size)
    }

    pub fn from_code(code: usize, size: usize) -> Move {
        if code == size * size {
            Move::Pass
        } else {
            Move::from_index(code, size)
        }
    }

    pub fn is_pass(self) -> bool {
        matches!(self, Move::Pass)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleViolation {
    #[error("board size {0} outside {MIN_SIZE}..={MAX_SIZE}")]
    BadSize(usize),
    #[error("point ({row}, {col}) is off the board")]
    OffBoard { row: usize, col: usize },
    #[error("point ({row}, {col}) is occupied")]
    Occupied { row: usize, col: usize },
    #[error("suicide at ({row}, {col})")]
    Suicide { row: usize, col: usize },
    #[error("superko: ({row}, {col}) repeats an earlier position")]
    Superko { row: usize, col: usize },
    #[error("game is over")]
    GameOver,
}

impl RuleViolation {
    /// Short name of the violated rule.
    pub fn rule(&self) -> &'static str {
        match self {
            RuleViolation::BadSize(_) => "size",
            RuleViolation::OffBoard { .. } => "off-board",
            RuleViolation::Occupied { .. } => "occupied",
            RuleViolation::Suicide { .. } => "suicide",
            RuleViolation::Superko { .. } => "superko",
            RuleViolation::GameOver => "game-over",
        }
    }
}

struct Zobrist {
    stones: Vec<[u64; 2]>,
    white_to_move: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn zobrist() -> &'static Zobrist {
    static KEYS: OnceLock<Zobrist> = OnceLock::new();
    KEYS.get_or_init(|| {
        let mut state = 0x5EED_0F60_u64;
        let stones = (0..MAX_SIZE * MAX_SIZE).map(|_| [splitmix64(&mut state), splitmix64(&mut state)]).collect();
        Zobrist {
            stones,
            white_to_move: splitmix64(&mut state),
        }
    })
}

#[inline]
pub(crate) fn stone_key(point: usize, color: Color) -> u64 {
    zobrist().stones[point][color.index()]
}

#[inline]
pub(crate) fn side_key() -> u64 {
    zobrist().white_to_move
}

#[derive(Default)]
struct PointSet([u64; 6]);

impl PointSet {
    /// Returns true if the point was not yet present.
    #[inline]
    fn insert(&mut self, p: usize) -> bool {
        let (w, b) = (p >> 6, 1u64 << (p & 63));
        let fresh = self.0[w] & b == 0;
        self.0[w] |= b;
        fresh
    }
}

/// A maximal connected group of same-colored stones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoString {
    pub color: Color,
    pub stones: Vec<usize>,
    pub liberties: Vec<usize>,
}

/// Bare stone configuration with capture logic, no history or turn.
///
/// Used directly by the tactical reader, where ko and superko are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Board {
    size: usize,
    cells: Vec<Option<Color>>,
}

impl Board {
    pub fn new(size: usize) -> Result<Board, RuleViolation> {
        if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
            return Err(RuleViolation::BadSize(size));
        }
        Ok(Board {
            size,
            cells: vec![None; size * size],
        })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn points(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn get(&self, point: usize) -> Option<Color> {
        self.cells[point]
    }

    pub fn cells(&self) -> &[Option<Color>] {
        &self.cells
    }

    /// Sets a cell without resolving captures. Intended for building test
    /// positions; callers are responsible for leaving no dead strings.
    pub fn set(&mut self, point: usize, color: Option<Color>) {
        self.cells[point] = color;
    }

    /// Orthogonal neighbours of `point`.
    #[inline]
    pub fn neighbors(&self, point: usize) -> impl Iterator<Item = usize> {
        let n = self.size;
        let (r, c) = (point / n, point % n);
        let up = (r > 0).then(|| point - n);
        let down = (r + 1 < n).then(|| point + n);
        let left = (c > 0).then(|| point - 1);
        let right = (c + 1 < n).then(|| point + 1);
        [up, down, left, right].into_iter().flatten()
    }

    /// Flood-fills the string containing `point`. Returns `None` on empty points.
    pub fn string_at(&self, point: usize) -> Option<GoString> {
        let color = self.cells[point]?;
        let mut seen = vec![false; self.cells.len()];
        let mut lib_seen = vec![false; self.cells.len()];
        let mut stack = vec![point];
        let mut stones = Vec::new();
        let mut liberties = Vec::new();
        seen[point] = true;
        while let Some(p) = stack.pop() {
            stones.push(p);
            for q in self.neighbors(p) {
                match self.cells[q] {
                    None if !lib_seen[q] => {
                        lib_seen[q] = true;
                        liberties.push(q);
                    }
                    Some(c) if c == color && !seen[q] => {
                        seen[q] = true;
                        stack.push(q);
                    }
                    _ => {}
                }
            }
        }
        stones.sort_unstable();
        liberties.sort_unstable();
        Some(GoString { color, stones, liberties })
    }

    /// Number of liberties of the string at `point`, stopping the count at `cap`.
    pub fn liberty_count(&self, point: usize, cap: usize) -> usize {
        let Some(color) = self.cells[point] else {
            return 0;
        };
        let mut seen = PointSet::default();
        let mut libs = PointSet::default();
        let mut stack = [0u16; MAX_SIZE * MAX_SIZE];
        let mut top = 1;
        stack[0] = point as u16;
        seen.insert(point);
        let mut count = 0;
        while top > 0 {
            top -= 1;
            let p = stack[top] as usize;
            for q in self.neighbors(p) {
                match self.cells[q] {
                    None => {
                        if libs.insert(q) {
                            count += 1;
                            if count >= cap {
                                return count;
                            }
                        }
                    }
                    Some(c) if c == color => {
                        if seen.insert(q) {
                            stack[top] = q as u16;
                            top += 1;
                        }
                    }
                    _ => {}
                }
            }
        }
        count
    }

    /// All strings on the board, each reported once, ordered by lowest stone.
    pub fn strings(&self) -> Vec<GoString> {
        let mut owner = vec![false; self.cells.len()];
        let mut out = Vec::new();
        for p in 0..self.cells.len() {
            if self.cells[p].is_some() && !owner[p] {
                let s = self.string_at(p).expect("occupied");
                for &q in &s.stones {
                    owner[q] = true;
                }
                out.push(s);
            }
        }
        out
    }

    fn remove_string(&mut self, point: usize) -> Vec<usize> {
        let s = self.string_at(point).expect("occupied");
        for &q in &s.stones {
            self.cells[q] = None;
        }
        s.stones
    }

    /// Places a stone, removes opponent strings left without liberties and
    /// returns the captured points. Fails on occupied points and suicide;
    /// the board is unchanged on failure.
    pub fn place(&mut self, color: Color, point: usize) -> Result<Vec<usize>, RuleViolation> {
        let (row, col) = (point / self.size, point % self.size);
        if self.cells[point].is_some() {
            return Err(RuleViolation::Occupied { row, col });
        }
        self.cells[point] = Some(color);
        let mut captured = Vec::new();
        let neighbors: Vec<usize> = self.neighbors(point).collect();
        for q in neighbors {
            if self.cells[q] == Some(color.opposite()) && self.liberty_count(q, 1) == 0 {
                captured.extend(self.remove_string(q));
            }
        }
        if captured.is_empty() && self.liberty_count(point, 1) == 0 {
            self.cells[point] = None;
            return Err(RuleViolation::Suicide { row, col });
        }
        Ok(captured)
    }

    /// Tromp-Taylor area score, positive when White is ahead.
    pub fn area_score(&self, komi: f32) -> f32 {
        let mut black = 0i32;
        let mut white = 0i32;
        let mut visited = vec![false; self.cells.len()];
        for p in 0..self.cells.len() {
            match self.cells[p] {
                Some(Color::Black) => black += 1,
                Some(Color::White) => white += 1,
                None if !visited[p] => {
                    let mut region = 0i32;
                    let mut borders = [false; 2];
                    let mut stack = vec![p];
                    visited[p] = true;
                    while let Some(q) = stack.pop() {
                        region += 1;
                        for r in self.neighbors(q) {
                            match self.cells[r] {
                                None if !visited[r] => {
                                    visited[r] = true;
                                    stack.push(r);
                                }
                                Some(c) => borders[c.index()] = true,
                                None => {}
                            }
                        }
                    }
                    match borders {
                        [true, false] => black += region,
                        [false, true] => white += region,
                        _ => {}
                    }
                }
                None => {}
            }
        }
        (white - black) as f32 + komi
    }

    pub fn hash(&self) -> u64 {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(p, c)| c.map(|c| stone_key(p, c)))
            .fold(0, |h, k| h ^ k)
    }
}

/// Immutable game state: stones, side to move, superko history and the
/// occupancy snapshots used by the encoder.
#[derive(Clone, Debug)]
pub struct Position {
    board: Board,
    to_move: Color,
    hash: u64,
    ko_history: Arc<HashSet<u64>>,
    /// Most recent first, at most `HISTORY_LEN` entries.
    history: Vec<Arc<Board>>,
    consecutive_passes: u8,
    last_move: Option<Move>,
}

impl PartialEq for Position {
    fn eq(&self, other: &Position) -> bool {
        self.board == other.board
            && self.to_move == other.to_move
            && self.hash == other.hash
            && self.consecutive_passes == other.consecutive_passes
            && self.history == other.history
            && self.ko_history == other.ko_history
    }
}

impl Position {
    pub fn new(size: usize) -> Result<Position, RuleViolation> {
        let board = Board::new(size)?;
        let hash = 0;
        let mut ko_history = HashSet::new();
        ko_history.insert(hash);
        Ok(Position {
            board,
            to_move: Color::Black,
            hash,
            ko_history: Arc::new(ko_history),
            history: Vec::new(),
            consecutive_passes: 0,
            last_move: None,
        })
    }

    /// Builds a position from a raw board with an empty game history.
    pub fn from_board(board: Board, to_move: Color) -> Position {
        let mut hash = board.hash();
        if to_move == Color::White {
            hash ^= side_key();
        }
        let mut ko_history = HashSet::new();
        ko_history.insert(hash);
        Position {
            board,
            to_move,
            hash,
            ko_history: Arc::new(ko_history),
            history: Vec::new(),
            consecutive_passes: 0,
            last_move: None,
        }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.board.size
    }

    #[inline]
    pub fn board(&self) -> &Board {
        &self.board
    }

    #[inline]
    pub fn to_move(&self) -> Color {
        self.to_move
    }

    #[inline]
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn ko_history(&self) -> &HashSet<u64> {
        &self.ko_history
    }

    /// Prior occupancy snapshots, most recent first.
    pub fn history(&self) -> &[Arc<Board>] {
        &self.history
    }

    pub fn consecutive_passes(&self) -> u8 {
        self.consecutive_passes
    }

    pub fn last_move(&self) -> Option<Move> {
        self.last_move
    }

    pub fn is_over(&self) -> bool {
        self.consecutive_passes >= 2
    }

    /// Resulting board and hash of a point move, or the violated rule.
    fn simulate(&self, point: usize) -> Result<(Board, u64), RuleViolation> {
        let mut board = self.board.clone();
        let color = self.to_move;
        let captured = board.place(color, point)?;
        let mut hash = self.hash ^ stone_key(point, color) ^ side_key();
        for q in captured {
            hash ^= stone_key(q, color.opposite());
        }
        if self.ko_history.contains(&hash) {
            let n = self.size();
            return Err(RuleViolation::Superko {
                row: point / n,
                col: point % n,
            });
        }
        Ok((board, hash))
    }

    fn check_point(&self, row: usize, col: usize) -> Result<usize, RuleViolation> {
        let n = self.size();
        if row >= n || col >= n {
            return Err(RuleViolation::OffBoard { row, col });
        }
        Ok(row * n + col)
    }

    pub fn is_legal(&self, m: Move) -> bool {
        self.check(m).is_ok()
    }

    /// Checks legality without building the successor position.
    pub fn check(&self, m: Move) -> Result<(), RuleViolation> {
        if self.is_over() {
            return Err(RuleViolation::GameOver);
        }
        match m {
            Move::Pass => Ok(()),
            Move::Point { row, col } => {
                let point = self.check_point(row as usize, col as usize)?;
                self.simulate(point).map(|_| ())
            }
        }
    }

    pub fn play(&self, m: Move) -> Result<Position, RuleViolation> {
        if self.is_over() {
            return Err(RuleViolation::GameOver);
        }
        let (board, hash, passes) = match m {
            Move::Pass => (self.board.clone(), self.hash ^ side_key(), self.consecutive_passes + 1),
            Move::Point { row, col } => {
                let point = self.check_point(row as usize, col as usize)?;
                let (board, hash) = self.simulate(point)?;
                (board, hash, 0)
            }
        };
        let mut ko_history = (*self.ko_history).clone();
        ko_history.insert(hash);
        let mut history = Vec::with_capacity(HISTORY_LEN);
        history.push(Arc::new(self.board.clone()));
        history.extend(self.history.iter().take(HISTORY_LEN - 1).cloned());
        Ok(Position {
            board,
            to_move: self.to_move.opposite(),
            hash,
            ko_history: Arc::new(ko_history),
            history,
            consecutive_passes: passes,
            last_move: Some(m),
        })
    }

    /// Same stones and history with `color` to move.
    pub fn with_to_move(&self, color: Color) -> Position {
        if color == self.to_move {
            return self.clone();
        }
        let mut p = self.clone();
        p.to_move = color;
        p.hash ^= side_key();
        p
    }

    /// Plays `m` for `color` even out of turn, as GTP clients may request.
    pub fn play_as(&self, color: Color, m: Move) -> Result<Position, RuleViolation> {
        self.with_to_move(color).play(m)
    }

    /// Legal moves ordered by flat index with pass last; empty once the game is over.
    pub fn legal_moves(&self) -> Vec<Move> {
        if self.is_over() {
            return Vec::new();
        }
        let n = self.size();
        let mut moves: Vec<Move> = (0..n * n)
            .filter(|&p| self.board.cells[p].is_none() && self.simulate(p).is_ok())
            .map(|p| Move::from_index(p, n))
            .collect();
        moves.push(Move::Pass);
        moves
    }

    pub fn tromp_taylor_score(&self, komi: f32) -> f32 {
        self.board.area_score(komi)
    }
}

/// Winner of a recorded game, encoded 0 for Black and 1 for White.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Winner {
    Black,
    White,
}

impl Winner {
    pub fn code(self) -> u8 {
        match self {
            Winner::Black => 0,
            Winner::White => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Winner> {
        match code {
            0 => Some(Winner::Black),
            1 => Some(Winner::White),
            _ => None,
        }
    }

    /// Value target: 1.0 when White won.
    pub fn value(self) -> f32 {
        self.code() as f32
    }

    pub fn from_score(score: f32) -> Winner {
        if score > 0.0 {
            Winner::White
        } else {
            Winner::Black
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameRecord {
    pub size: usize,
    pub result: Winner,
    pub moves: Vec<Move>,
    pub komi: f32,
}

impl GameRecord {
    /// Replays the moves from the empty board, failing on the first illegal one.
    pub fn replay(&self) -> Result<Vec<Position>, (usize, RuleViolation)> {
        let mut pos = Position::new(self.size).map_err(|e| (0, e))?;
        let mut out = Vec::with_capacity(self.moves.len() + 1);
        for (i, &m) in self.moves.iter().enumerate() {
            let next = pos.play(m).map_err(|e| (i, e))?;
            out.push(pos);
            pos = next;
        }
        out.push(pos);
        Ok(out)
    }

    /// Number of point (non-pass) moves, i.e. sampleable states.
    pub fn sampleable(&self) -> usize {
        self.moves.iter().filter(|m| !m.is_pass()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn play_all(size: usize, moves: &[(usize, usize)]) -> Position {
        moves.iter().fold(Position::new(size).unwrap(), |p, &(r, c)| p.play(Move::at(r, c)).unwrap())
    }

    #[test]
    fn new_position_sizes() {
        let p = Position::new(19).unwrap();
        assert_eq!(p.board().points(), 361);
        assert!(p.board().cells().iter().all(|c| c.is_none()));
        assert_eq!(p.to_move(), Color::Black);
        assert!(p.ko_history().contains(&p.hash()));
        assert_eq!(Position::new(9).unwrap().board().points(), 81);
        assert_eq!(Position::new(4).unwrap_err(), RuleViolation::BadSize(4));
        assert!(Position::new(20).is_err());
    }

    #[test]
    fn capture_removes_stone() {
        // White at (0,1) surrounded by black on (0,0), (0,2) then (1,1).
        let p = play_all(9, &[(0, 0), (0, 1), (0, 2), (5, 5)]);
        let p = p.play(Move::at(1, 1)).unwrap();
        assert_eq!(p.board().get(1), None);
        assert_eq!(p.board().get(10), Some(Color::Black));
    }

    #[test]
    fn immediate_ko_retake_is_superko() {
        let p = play_all(9, &[(0, 1), (0, 2), (1, 0), (1, 3), (2, 1), (2, 2), (1, 2)]);
        // White takes the ko at (1,1), capturing (1,2).
        let p = p.play(Move::at(1, 1)).unwrap();
        assert_eq!(p.board().get(9 + 2), None);
        // Black retakes immediately, recreating the board from two moves ago.
        let err = p.play(Move::at(1, 2)).unwrap_err();
        assert_eq!(err.rule(), "superko");
    }

    #[test]
    fn two_passes_end_game() {
        let p = Position::new(9).unwrap();
        let p = p.play(Move::Pass).unwrap().play(Move::Pass).unwrap();
        assert_eq!(p.consecutive_passes(), 2);
        assert!(p.is_over());
        assert!(p.legal_moves().is_empty());
        assert_eq!(p.play(Move::Pass).unwrap_err(), RuleViolation::GameOver);
    }

    #[test]
    fn point_move_resets_passes() {
        let p = Position::new(9).unwrap().play(Move::Pass).unwrap();
        assert_eq!(p.consecutive_passes(), 1);
        let p = p.play(Move::at(3, 3)).unwrap();
        assert_eq!(p.consecutive_passes(), 0);
    }

    #[test]
    fn occupied_and_suicide() {
        let p = play_all(9, &[(0, 0)]);
        assert_eq!(p.play(Move::at(0, 0)).unwrap_err().rule(), "occupied");
        // Black surrounds the corner (0,0): White playing there is suicide.
        let p = play_all(9, &[(0, 1), (8, 8), (1, 0)]);
        assert_eq!(p.play(Move::at(0, 0)).unwrap_err().rule(), "suicide");
        assert_eq!(p.play(Move::at(9, 0)).unwrap_err(), RuleViolation::OffBoard { row: 9, col: 0 });
    }

    #[test]
    fn legal_move_counts() {
        let p = Position::new(19).unwrap();
        let moves = p.legal_moves();
        assert_eq!(moves.len(), 362);
        assert_eq!(*moves.last().unwrap(), Move::Pass);
        let p = p.play(Move::at(3, 3)).unwrap();
        assert_eq!(p.legal_moves().len(), 361);
    }

    #[test]
    fn only_pass_when_last_point_is_suicide() {
        // A white-filled 5x5 board with a single vacancy: White filling it
        // removes its own last liberty.
        let mut b = Board::new(5).unwrap();
        for p in 1..25 {
            b.set(p, Some(Color::White));
        }
        let pos = Position::from_board(b, Color::White);
        assert_eq!(pos.legal_moves(), vec![Move::Pass]);
        // Brute-force the single candidate against the rules.
        assert_eq!(pos.play(Move::at(0, 0)).unwrap_err().rule(), "suicide");
    }

    #[test]
    fn hash_is_order_independent() {
        let e1 = Position::new(9).unwrap();
        let e2 = Position::new(9).unwrap();
        assert_eq!(e1.hash(), e2.hash());
        let a = play_all(9, &[(0, 0), (0, 1), (0, 2)]);
        let b = play_all(9, &[(0, 2), (0, 1), (0, 0)]);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.board().hash() ^ side_key());
    }

    #[test]
    fn scores() {
        let p = Position::new(9).unwrap();
        assert_eq!(p.tromp_taylor_score(7.5), 7.5);
        let mut b = Board::new(5).unwrap();
        for p in 0..25 {
            if p % 7 != 0 {
                b.set(p, Some(Color::Black));
            }
        }
        assert_eq!(b.area_score(7.5), -17.5);
    }

    #[test]
    fn play_is_pure() {
        let p = play_all(9, &[(2, 2), (3, 3)]);
        let before = p.clone();
        let a = p.play(Move::at(4, 4)).unwrap();
        let b = p.play(Move::at(4, 4)).unwrap();
        assert_eq!(p, before);
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn history_snapshots_most_recent_first() {
        let p = play_all(9, &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5)]);
        assert_eq!(p.history().len(), HISTORY_LEN);
        let prev = &p.history()[0];
        assert_eq!(prev.get(4 * 9 + 4), Some(Color::Black));
        assert_eq!(prev.get(5 * 9 + 5), None);
    }
}
