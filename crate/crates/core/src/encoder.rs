//! The 21-plane network input and the eight board symmetries.
//!
//! Plane layout, every plane `size * size` points in row-major order:
//!
//! | planes | content                                                     |
//! |--------|-------------------------------------------------------------|
//! | 0-1    | current black stones, current white stones                  |
//! | 2-9    | previous four positions (black, white), most recent first  |
//! | 10-13  | black strings with 1, 2, 3, >=4 liberties                   |
//! | 14-17  | white strings with 1, 2, 3, >=4 liberties                   |
//! | 18     | string capturable by ladder                                 |
//! | 19     | string adjacent to a string capturable by ladder            |
//! | 20     | all ones when White is to move                              |
//!
//! Stones are encoded by absolute color, matching the absolute value target.

use thiserror::Error;

use crate::goban::{Board, Color, GameRecord, Move, Position, RuleViolation, HISTORY_LEN};
use crate::tactics::ladder_status;

pub const PLANES: usize = 21;
const HISTORY_PLANE: usize = 2;
const LIBERTY_PLANE: usize = 10;
const LADDER_PLANE: usize = 18;
const ADJACENT_LADDER_PLANE: usize = 19;
const COLOR_PLANE: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("index {index} out of range for a {size}x{size} board")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("ply {ply} out of range for a {len}-move game")]
    PlyOutOfRange { ply: usize, len: usize },
    #[error("ply {0} is a pass")]
    PassMove(usize),
    #[error("record replay failed at ply {ply}: {source}")]
    Replay { ply: usize, source: RuleViolation },
    #[error("symmetry id {0} outside 0..8")]
    BadSymmetry(u8),
}

/// Binary input planes, plane-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureTensor {
    size: usize,
    data: Vec<u8>,
}

impl FeatureTensor {
    pub fn zeros(size: usize) -> FeatureTensor {
        FeatureTensor {
            size,
            data: vec![0; PLANES * size * size],
        }
    }

    pub fn from_raw(size: usize, data: Vec<u8>) -> FeatureTensor {
        assert_eq!(data.len(), PLANES * size * size, "feature tensor length");
        FeatureTensor { size, data }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn planes(&self) -> usize {
        self.data.len() / (self.size * self.size)
    }

    #[inline]
    pub fn plane(&self, k: usize) -> &[u8] {
        let s = self.size * self.size;
        &self.data[k * s..(k + 1) * s]
    }

    #[inline]
    fn plane_mut(&mut self, k: usize) -> &mut [u8] {
        let s = self.size * self.size;
        &mut self.data[k * s..(k + 1) * s]
    }

    #[inline]
    pub fn get(&self, plane: usize, point: usize) -> u8 {
        self.data[plane * self.size * self.size + point]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }
}

/// One of the eight isometries of the square board.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symmetry {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipRows,
    FlipCols,
    Transpose,
    AntiTranspose,
}

impl Symmetry {
    pub const ALL: [Symmetry; 8] = [
        Symmetry::Identity,
        Symmetry::Rot90,
        Symmetry::Rot180,
        Symmetry::Rot270,
        Symmetry::FlipRows,
        Symmetry::FlipCols,
        Symmetry::Transpose,
        Symmetry::AntiTranspose,
    ];

    pub fn from_id(id: u8) -> Result<Symmetry, EncodeError> {
        Symmetry::ALL.get(id as usize).copied().ok_or(EncodeError::BadSymmetry(id))
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn inverse(self) -> Symmetry {
        match self {
            Symmetry::Rot90 => Symmetry::Rot270,
            Symmetry::Rot270 => Symmetry::Rot90,
            s => s,
        }
    }

    /// Image of `(row, col)`. Rot90 maps `(r, c)` to `(c, size - 1 - r)`.
    #[inline]
    pub fn apply(self, row: usize, col: usize, size: usize) -> (usize, usize) {
        let m = size - 1;
        match self {
            Symmetry::Identity => (row, col),
            Symmetry::Rot90 => (col, m - row),
            Symmetry::Rot180 => (m - row, m - col),
            Symmetry::Rot270 => (m - col, row),
            Symmetry::FlipRows => (m - row, col),
            Symmetry::FlipCols => (row, m - col),
            Symmetry::Transpose => (col, row),
            Symmetry::AntiTranspose => (m - col, m - row),
        }
    }

    #[inline]
    pub fn apply_index(self, index: usize, size: usize) -> usize {
        let (r, c) = self.apply(index / size, index % size, size);
        r * size + c
    }

    pub fn apply_move(self, m: Move, size: usize) -> Move {
        match m {
            Move::Pass => Move::Pass,
            Move::Point { row, col } => {
                let (r, c) = self.apply(row as usize, col as usize, size);
                Move::at(r, c)
            }
        }
    }

    /// Composition: `self.then(other)` applies `self` first.
    pub fn then(self, other: Symmetry) -> Symmetry {
        // Resolve by probing two points of a 3x3 board; the group is small.
        let probe = |s: Symmetry| (s.apply_index(1, 3), s.apply_index(5, 3));
        let target = {
            let a = other.apply_index(self.apply_index(1, 3), 3);
            let b = other.apply_index(self.apply_index(5, 3), 3);
            (a, b)
        };
        Symmetry::ALL.into_iter().find(|&s| probe(s) == target).expect("dihedral group is closed")
    }
}

/// Training triple: input planes, played move and game result.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: FeatureTensor,
    /// Flat index of the played move.
    pub policy_target: usize,
    /// 1.0 if White won, 0.0 if Black won.
    pub value_target: f32,
}

fn fill_stones(tensor: &mut FeatureTensor, plane: usize, board: &Board) {
    for (p, c) in board.cells().iter().enumerate() {
        match c {
            Some(Color::Black) => tensor.plane_mut(plane)[p] = 1,
            Some(Color::White) => tensor.plane_mut(plane + 1)[p] = 1,
            None => {}
        }
    }
}

pub fn encode(position: &Position) -> FeatureTensor {
    let board = position.board();
    let mut t = FeatureTensor::zeros(board.size());
    fill_stones(&mut t, 0, board);
    for (k, prev) in position.history().iter().take(HISTORY_LEN).enumerate() {
        fill_stones(&mut t, HISTORY_PLANE + 2 * k, prev);
    }
    for s in board.strings() {
        let bin = s.liberties.len().clamp(1, 4) - 1;
        let base = match s.color {
            Color::Black => LIBERTY_PLANE,
            Color::White => LIBERTY_PLANE + 4,
        };
        let plane = t.plane_mut(base + bin);
        for &p in &s.stones {
            plane[p] = 1;
        }
    }
    let ladders = ladder_status(position);
    for p in 0..board.points() {
        t.plane_mut(LADDER_PLANE)[p] = ladders.in_ladder[p] as u8;
        t.plane_mut(ADJACENT_LADDER_PLANE)[p] = ladders.adjacent_to_ladder[p] as u8;
    }
    if position.to_move() == Color::White {
        t.plane_mut(COLOR_PLANE).fill(1);
    }
    t
}

pub fn transform_tensor(tensor: &FeatureTensor, symmetry: Symmetry) -> FeatureTensor {
    if symmetry == Symmetry::Identity {
        return tensor.clone();
    }
    let n = tensor.size();
    let s = n * n;
    let map: Vec<usize> = (0..s).map(|p| symmetry.apply_index(p, n)).collect();
    let mut out = vec![0u8; tensor.data.len()];
    for (src, dst) in tensor.data.chunks_exact(s).zip(out.chunks_exact_mut(s)) {
        for (p, &q) in map.iter().enumerate() {
            dst[q] = src[p];
        }
    }
    FeatureTensor { size: n, data: out }
}

pub fn transform_policy_index(index: usize, symmetry: Symmetry, size: usize) -> Result<usize, EncodeError> {
    if index >= size * size {
        return Err(EncodeError::IndexOutOfRange { index, size });
    }
    Ok(symmetry.apply_index(index, size))
}

/// Position before move `ply` of a record.
pub fn position_at(record: &GameRecord, ply: usize) -> Result<Position, EncodeError> {
    if ply >= record.moves.len() {
        return Err(EncodeError::PlyOutOfRange { ply, len: record.moves.len() });
    }
    let mut pos = Position::new(record.size).map_err(|e| EncodeError::Replay { ply: 0, source: e })?;
    for (i, &m) in record.moves[..ply].iter().enumerate() {
        pos = pos.play(m).map_err(|e| EncodeError::Replay { ply: i, source: e })?;
    }
    Ok(pos)
}

pub fn make_sample(record: &GameRecord, ply: usize, symmetry: Symmetry) -> Result<Sample, EncodeError> {
    let pos = position_at(record, ply)?;
    let index = record.moves[ply].index(record.size).ok_or(EncodeError::PassMove(ply))?;
    Ok(sample_from(&pos, index, record.result.value(), symmetry))
}

/// Builds a sample from an already replayed position.
pub fn sample_from(position: &Position, move_index: usize, value: f32, symmetry: Symmetry) -> Sample {
    let size = position.size();
    Sample {
        input: transform_tensor(&encode(position), symmetry),
        policy_target: symmetry.apply_index(move_index, size),
        value_target: value,
    }
}
