//! Ladder reading for the two ladder feature planes.
//!
//! A string is "in ladder" when it has one or two liberties and its
//! opponent, moving first, captures it by a sequence of ataris. The attacker
//! only plays moves that leave the target with exactly one liberty; the
//! defender only extends from its last liberty or captures an adjacent
//! attacker string that is in atari. Ko is ignored by the reader.

use std::collections::HashMap;

use thiserror::Error;

use crate::goban::{Board, Color, Position};

/// Ply cap for both the ladder reader and the brute-force oracle.
pub const LADDER_DEPTH: usize = 60;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LadderStatus {
    /// Point belongs to a string capturable by ladder.
    pub in_ladder: Vec<bool>,
    /// Point belongs to a string adjacent to a string that is in ladder.
    pub adjacent_to_ladder: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptureVerdict {
    Captured,
    Escapes,
    Unknown,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TacticsError {
    #[error("no string at point {0}")]
    NoString(usize),
    #[error("depth {0} exceeds the {LADDER_DEPTH}-ply cap")]
    DepthTooLarge(usize),
}

pub fn ladder_status(position: &Position) -> LadderStatus {
    ladder_status_board(position.board())
}

pub fn ladder_status_board(board: &Board) -> LadderStatus {
    let n = board.points();
    let mut in_ladder = vec![false; n];
    let strings = board.strings();
    let mut string_of = vec![usize::MAX; n];
    let mut captured = vec![false; strings.len()];
    for (id, s) in strings.iter().enumerate() {
        for &p in &s.stones {
            string_of[p] = id;
        }
        if (1..=2).contains(&s.liberties.len()) && is_ladder_captured(board, s.stones[0]) {
            captured[id] = true;
            for &p in &s.stones {
                in_ladder[p] = true;
            }
        }
    }
    let mut adjacent_to_ladder = vec![false; n];
    for s in &strings {
        let touches = s
            .stones
            .iter()
            .any(|&p| board.neighbors(p).any(|q| board.get(q) == Some(s.color.opposite()) && captured[string_of[q]]));
        if touches {
            for &p in &s.stones {
                adjacent_to_ladder[p] = true;
            }
        }
    }
    LadderStatus { in_ladder, adjacent_to_ladder }
}

/// True if the opponent of the string at `target`, moving first, captures it
/// by ladder within the ply cap. Inconclusive reads count as not captured.
pub fn is_ladder_captured(board: &Board, target: usize) -> bool {
    match board.get(target) {
        Some(color) => Reader::default().attack(board, target, color.opposite(), 0),
        None => false,
    }
}

/// Transposition tables for one read, keyed by stone configuration and ply
/// (target and attacker are fixed for the whole read). Keying on ply keeps
/// every verdict a function of the position alone, so capture-recapture
/// cycles cut at the ply cap cannot leak into shallower reads, and the
/// result does not depend on exploration order or board orientation.
#[derive(Default)]
struct Reader {
    attacks: HashMap<(u64, usize), bool>,
    defenses: HashMap<(u64, usize), bool>,
}

impl Reader {
    fn attack(&mut self, board: &Board, target: usize, attacker: Color, ply: usize) -> bool {
        let key = (board.hash(), ply);
        if let Some(&v) = self.attacks.get(&key) {
            return v;
        }
        let v = self.attack_uncached(board, target, attacker, ply);
        self.attacks.insert(key, v);
        v
    }

    fn defend(&mut self, board: &Board, target: usize, attacker: Color, ply: usize) -> bool {
        let key = (board.hash(), ply);
        if let Some(&v) = self.defenses.get(&key) {
            return v;
        }
        let v = self.defend_uncached(board, target, attacker, ply);
        self.defenses.insert(key, v);
        v
    }

    fn attack_uncached(&mut self, board: &Board, target: usize, attacker: Color, ply: usize) -> bool {
        let Some(s) = board.string_at(target) else {
            return true;
        };
        match s.liberties.len() {
            0 => return true,
            1 => return ply < LADDER_DEPTH,
            2 => {}
            _ => return false,
        }
        if ply + 1 >= LADDER_DEPTH {
            return false;
        }
        for &lib in &s.liberties {
            let mut next = board.clone();
            if next.place(attacker, lib).is_err() {
                continue;
            }
            if next.liberty_count(target, 2) != 1 {
                continue;
            }
            if !self.defend(&next, target, attacker, ply + 1) {
                return true;
            }
        }
        false
    }

    /// Defender to move with the target in atari. Returns true on escape.
    fn defend_uncached(&mut self, board: &Board, target: usize, attacker: Color, ply: usize) -> bool {
        let s = board.string_at(target).expect("target on board");
        let defender = s.color;
        let mut candidates = s.liberties.clone();
        for &p in &s.stones {
            for q in board.neighbors(p) {
                if board.get(q) == Some(attacker) {
                    if let Some(adj) = board.string_at(q) {
                        if adj.liberties.len() == 1 && !candidates.contains(&adj.liberties[0]) {
                            candidates.push(adj.liberties[0]);
                        }
                    }
                }
            }
        }
        for c in candidates {
            let mut next = board.clone();
            if next.place(defender, c).is_err() {
                continue;
            }
            match next.liberty_count(target, 3) {
                0 | 1 => continue,
                2 => {
                    if ply + 1 >= LADDER_DEPTH || !self.attack(&next, target, attacker, ply + 1) {
                        return true;
                    }
                }
                _ => return true,
            }
        }
        false
    }
}

/// Exhaustive capture search used as an oracle for the ladder reader.
///
/// The defender considers every legal point (and passing); the attacker
/// considers every legal point that leaves the target with one liberty, or
/// captures it outright. Reaching three liberties is an escape, as is the
/// attacker running out of forcing moves. Ko is ignored.
pub fn brute_force_capture(board: &Board, target: usize, depth: usize) -> Result<CaptureVerdict, TacticsError> {
    if depth > LADDER_DEPTH {
        return Err(TacticsError::DepthTooLarge(depth));
    }
    let Some(color) = board.get(target) else {
        return Err(TacticsError::NoString(target));
    };
    let mut oracle = Oracle {
        target,
        attacker: color.opposite(),
        table: HashMap::new(),
    };
    Ok(oracle.attacker_node(board, depth))
}

struct Oracle {
    target: usize,
    attacker: Color,
    /// (board hash, attacker to move) -> (verdict, remaining plies searched).
    table: HashMap<(u64, bool), (CaptureVerdict, usize)>,
}

impl Oracle {
    fn lookup(&self, key: (u64, bool), remaining: usize) -> Option<CaptureVerdict> {
        let &(verdict, searched) = self.table.get(&key)?;
        // Decisive verdicts stay valid with more plies, unknown ones with fewer.
        let valid = match verdict {
            CaptureVerdict::Unknown => remaining <= searched,
            _ => remaining >= searched,
        };
        valid.then_some(verdict)
    }

    fn captured(&self, board: &Board) -> bool {
        board.get(self.target) != Some(self.attacker.opposite())
    }

    fn attacker_node(&mut self, board: &Board, remaining: usize) -> CaptureVerdict {
        let key = (board.hash(), true);
        if let Some(v) = self.lookup(key, remaining) {
            return v;
        }
        let v = self.attacker_search(board, remaining);
        self.table.insert(key, (v, remaining));
        v
    }

    fn defender_node(&mut self, board: &Board, remaining: usize) -> CaptureVerdict {
        let key = (board.hash(), false);
        if let Some(v) = self.lookup(key, remaining) {
            return v;
        }
        let v = self.defender_search(board, remaining);
        self.table.insert(key, (v, remaining));
        v
    }

    fn attacker_search(&mut self, board: &Board, remaining: usize) -> CaptureVerdict {
        let libs = board.liberty_count(self.target, 3);
        if libs >= 3 {
            return CaptureVerdict::Escapes;
        }
        if remaining == 0 {
            return CaptureVerdict::Unknown;
        }
        let mut unknown = false;
        for p in 0..board.points() {
            if board.get(p).is_some() {
                continue;
            }
            let mut next = board.clone();
            if next.place(self.attacker, p).is_err() {
                continue;
            }
            if self.captured(&next) {
                return CaptureVerdict::Captured;
            }
            // Once in atari only the capture itself is forcing.
            if libs == 2 && next.liberty_count(self.target, 2) == 1 {
                match self.defender_node(&next, remaining - 1) {
                    CaptureVerdict::Captured => return CaptureVerdict::Captured,
                    CaptureVerdict::Unknown => unknown = true,
                    CaptureVerdict::Escapes => {}
                }
            }
        }
        if unknown {
            CaptureVerdict::Unknown
        } else {
            CaptureVerdict::Escapes
        }
    }

    fn defender_search(&mut self, board: &Board, remaining: usize) -> CaptureVerdict {
        if remaining == 0 {
            return CaptureVerdict::Unknown;
        }
        let defender = self.attacker.opposite();
        let mut unknown = false;
        // `None` is a pass.
        let choices = std::iter::once(None).chain((0..board.points()).map(Some));
        for choice in choices {
            let next = match choice {
                None => board.clone(),
                Some(p) => {
                    if board.get(p).is_some() {
                        continue;
                    }
                    let mut next = board.clone();
                    if next.place(defender, p).is_err() {
                        continue;
                    }
                    next
                }
            };
            match self.attacker_node(&next, remaining - 1) {
                CaptureVerdict::Escapes => return CaptureVerdict::Escapes,
                CaptureVerdict::Unknown => unknown = true,
                CaptureVerdict::Captured => {}
            }
        }
        if unknown {
            CaptureVerdict::Unknown
        } else {
            CaptureVerdict::Captured
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn board(size: usize, black: &[(usize, usize)], white: &[(usize, usize)]) -> Board {
        let mut b = Board::new(size).unwrap();
        for &(r, c) in black {
            b.set(r * size + c, Some(Color::Black));
        }
        for &(r, c) in white {
            b.set(r * size + c, Some(Color::White));
        }
        b
    }

    #[test]
    fn empty_board_has_no_ladders() {
        let s = ladder_status(&Position::new(19).unwrap());
        assert!(s.in_ladder.iter().all(|&x| !x));
        assert!(s.adjacent_to_ladder.iter().all(|&x| !x));
    }

    #[test]
    fn oracle_edge_cases() {
        // White stone in atari: one attacker ply captures it.
        let b = board(9, &[(0, 1)], &[(0, 0)]);
        assert_eq!(brute_force_capture(&b, 0, 1), Ok(CaptureVerdict::Captured));
        assert!(is_ladder_captured(&b, 0));
        // Lone stone on the open board with four liberties.
        let b = board(9, &[], &[(4, 4)]);
        assert_eq!(brute_force_capture(&b, 40, 10), Ok(CaptureVerdict::Escapes));
        assert!(!is_ladder_captured(&b, 40));
        assert_eq!(brute_force_capture(&b, 0, 10), Err(TacticsError::NoString(0)));
        assert_eq!(brute_force_capture(&b, 40, 61), Err(TacticsError::DepthTooLarge(61)));
    }

    /// White stone at (5,3) chased toward the upper right; the lower-left
    /// direction is blocked by a white stone at (7,1).
    fn ladder_base(extra_white: &[(usize, usize)], extra_black: &[(usize, usize)]) -> Board {
        let mut black = vec![(4, 3), (5, 2), (6, 4)];
        black.extend_from_slice(extra_black);
        let mut white = vec![(5, 3), (7, 1)];
        white.extend_from_slice(extra_white);
        board(9, &black, &white)
    }

    #[test]
    fn classic_ladder_and_breakers() {
        let t = 5 * 9 + 3;
        let open = ladder_base(&[], &[]);
        assert!(is_ladder_captured(&open, t));
        assert_eq!(brute_force_capture(&open, t, 60), Ok(CaptureVerdict::Captured));
        for breaker in [(2, 6), (3, 7), (1, 7)] {
            let b = ladder_base(&[breaker], &[]);
            assert!(!is_ladder_captured(&b, t), "breaker {breaker:?}");
            assert_eq!(brute_force_capture(&b, t, 60), Ok(CaptureVerdict::Escapes));
        }
        let s = ladder_status_board(&open);
        assert!(s.in_ladder[t]);
        assert!(s.adjacent_to_ladder[4 * 9 + 3]);
    }

    #[test]
    fn masks_are_stringwise() {
        // White pair on the edge in atari under a black pair.
        let b = board(9, &[(1, 0), (1, 1)], &[(0, 0), (0, 1)]);
        let s = ladder_status_board(&b);
        assert!(s.in_ladder[0] && s.in_ladder[1]);
        assert!(!s.adjacent_to_ladder[2]);
        assert!(s.adjacent_to_ladder[9] && s.adjacent_to_ladder[10]);
        assert!(!s.adjacent_to_ladder[0]);
    }
}
