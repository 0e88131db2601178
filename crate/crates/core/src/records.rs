//! Game-record ingestion (SGF), the GORC binary cache, uniform state sampling
//! and train/validation splitting.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{make_sample, Sample, Symmetry};
use crate::goban::{GameRecord, Move, RuleViolation, Winner, DEFAULT_KOMI, MAX_SIZE, MIN_SIZE};

pub const CACHE_MAGIC: &[u8; 4] = b"GORC";
pub const CACHE_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SgfError {
    #[error("syntax error at byte {0}")]
    Syntax(usize),
    #[error("no game tree")]
    Empty,
    #[error("missing result")]
    MissingResult,
    #[error("unusable result {0:?}")]
    BadResult(String),
    #[error("bad board size {0:?}")]
    BadSize(String),
    #[error("malformed coordinate {0:?}")]
    BadCoordinate(String),
    #[error("handicap game ({0} stones)")]
    Handicap(u32),
    #[error("setup stones present")]
    Setup,
    #[error("illegal move at ply {ply}: {violation}")]
    Illegal { ply: usize, violation: RuleViolation },
}

impl SgfError {
    /// Short machine-friendly rejection reason.
    pub fn reason(&self) -> &'static str {
        match self {
            SgfError::Syntax(_) | SgfError::Empty => "syntax",
            SgfError::MissingResult => "missing-result",
            SgfError::BadResult(_) => "no-result",
            SgfError::BadSize(_) => "size",
            SgfError::BadCoordinate(_) => "coordinate",
            SgfError::Handicap(_) | SgfError::Setup => "handicap",
            SgfError::Illegal { violation, .. } => violation.rule(),
        }
    }
}

type Node = Vec<(String, Vec<String>)>;

struct SgfReader<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> SgfReader<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> Result<(), SgfError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(SgfError::Syntax(self.pos))
        }
    }

    /// Parses one game tree, keeping only its main line.
    fn tree(&mut self) -> Result<Vec<Node>, SgfError> {
        self.expect(b'(')?;
        let mut nodes = Vec::new();
        while self.peek() == Some(b';') {
            self.pos += 1;
            nodes.push(self.node()?);
        }
        let mut first = true;
        while self.peek() == Some(b'(') {
            let sub = self.tree()?;
            if first {
                nodes.extend(sub);
                first = false;
            }
        }
        self.expect(b')')?;
        Ok(nodes)
    }

    fn node(&mut self) -> Result<Node, SgfError> {
        let mut props = Vec::new();
        loop {
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.text.len() && self.text[self.pos].is_ascii_alphabetic() {
                self.pos += 1;
            }
            if start == self.pos {
                return Ok(props);
            }
            let ident: String = self.text[start..self.pos]
                .iter()
                .filter(|b| b.is_ascii_uppercase())
                .map(|&b| b as char)
                .collect();
            let mut values = Vec::new();
            while self.peek() == Some(b'[') {
                self.pos += 1;
                values.push(self.value()?);
            }
            if values.is_empty() {
                return Err(SgfError::Syntax(self.pos));
            }
            props.push((ident, values));
        }
    }

    fn value(&mut self) -> Result<String, SgfError> {
        let mut out = Vec::new();
        loop {
            match self.text.get(self.pos) {
                None => return Err(SgfError::Syntax(self.pos)),
                Some(b']') => {
                    self.pos += 1;
                    return Ok(String::from_utf8_lossy(&out).into_owned());
                }
                Some(b'\\') => {
                    if let Some(&c) = self.text.get(self.pos + 1) {
                        out.push(c);
                    }
                    self.pos += 2;
                }
                Some(&c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }
}

fn sgf_move(value: &str, size: usize) -> Result<Move, SgfError> {
    let v = value.trim();
    let bytes = v.as_bytes();
    if bytes.is_empty() || (v == "tt" && size <= 19) {
        return Ok(Move::Pass);
    }
    if bytes.len() != 2 || !bytes.iter().all(|b| b.is_ascii_lowercase()) {
        return Err(SgfError::BadCoordinate(v.to_string()));
    }
    let col = (bytes[0] - b'a') as usize;
    let row = (bytes[1] - b'a') as usize;
    if row >= size || col >= size {
        return Err(SgfError::BadCoordinate(v.to_string()));
    }
    Ok(Move::at(row, col))
}

fn record_from_nodes(nodes: &[Node]) -> Result<GameRecord, SgfError> {
    let root = nodes.first().ok_or(SgfError::Empty)?;
    let prop = |name: &str| root.iter().find(|(k, _)| k == name).map(|(_, v)| v[0].trim());
    let size = match prop("SZ") {
        None => 19,
        Some(s) => match s.parse::<usize>() {
            Ok(n) if (MIN_SIZE..=MAX_SIZE).contains(&n) => n,
            _ => return Err(SgfError::BadSize(s.to_string())),
        },
    };
    if let Some(h) = prop("HA") {
        let h: u32 = h.parse().unwrap_or(0);
        if h > 1 {
            return Err(SgfError::Handicap(h));
        }
    }
    let result = match prop("RE") {
        None => return Err(SgfError::MissingResult),
        Some(r) if r.starts_with("B+") || r.starts_with("b+") => Winner::Black,
        Some(r) if r.starts_with("W+") || r.starts_with("w+") => Winner::White,
        Some(r) => return Err(SgfError::BadResult(r.to_string())),
    };
    let komi = prop("KM").and_then(|k| k.parse::<f32>().ok()).unwrap_or(DEFAULT_KOMI);
    let mut moves = Vec::new();
    for node in nodes {
        for (k, v) in node {
            match k.as_str() {
                "B" | "W" => moves.push(sgf_move(&v[0], size)?),
                "AB" | "AW" | "AE" => return Err(SgfError::Setup),
                _ => {}
            }
        }
    }
    let record = GameRecord { size, result, moves, komi };
    record.replay().map_err(|(ply, violation)| SgfError::Illegal { ply, violation })?;
    Ok(record)
}

/// Parses every game of an SGF collection; each game is accepted or rejected
/// independently.
pub fn parse_sgf_collection(text: &[u8]) -> Result<Vec<Result<GameRecord, SgfError>>, SgfError> {
    let mut reader = SgfReader { text, pos: 0 };
    let mut out = Vec::new();
    while reader.peek() == Some(b'(') {
        let nodes = reader.tree()?;
        out.push(record_from_nodes(&nodes));
    }
    if out.is_empty() {
        return Err(SgfError::Empty);
    }
    Ok(out)
}

/// Parses the first game of an SGF text.
pub fn parse_sgf(text: &[u8]) -> Result<GameRecord, SgfError> {
    let mut reader = SgfReader { text, pos: 0 };
    if reader.peek() != Some(b'(') {
        return Err(SgfError::Empty);
    }
    record_from_nodes(&reader.tree()?)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    Empty,
    #[error("game {0} has no sampleable states")]
    NoStates(usize),
    #[error("game {index} is {found}x{found}, corpus is {expected}x{expected}")]
    SizeMismatch { index: usize, expected: usize, found: usize },
    #[error("holdout of {holdout} games leaves none of {games} for training")]
    HoldoutTooLarge { holdout: usize, games: usize },
}

/// Games of one board size with a prefix-sum index over their point moves.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    size: usize,
    games: Vec<GameRecord>,
    cumulative: Vec<u64>,
}

impl Corpus {
    pub fn new(size: usize, games: Vec<GameRecord>) -> Result<Corpus, CorpusError> {
        let mut cumulative = Vec::with_capacity(games.len());
        let mut total = 0u64;
        for (index, g) in games.iter().enumerate() {
            if g.size != size {
                return Err(CorpusError::SizeMismatch {
                    index,
                    expected: size,
                    found: g.size,
                });
            }
            let n = g.sampleable() as u64;
            if n == 0 {
                return Err(CorpusError::NoStates(index));
            }
            total += n;
            cumulative.push(total);
        }
        Ok(Corpus { size, games, cumulative })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn games(&self) -> &[GameRecord] {
        &self.games
    }

    pub fn len(&self) -> usize {
        self.games.len()
    }

    pub fn is_empty(&self) -> bool {
        self.games.is_empty()
    }

    /// Prefix sums of per-game sampleable state counts.
    pub fn cumulative_state_index(&self) -> &[u64] {
        &self.cumulative
    }

    pub fn total_states(&self) -> u64 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    /// Maps a global state ordinal to (game, ply of the n-th point move).
    pub fn locate(&self, state: u64) -> Option<(usize, usize)> {
        if state >= self.total_states() {
            return None;
        }
        let game = self.cumulative.partition_point(|&c| c <= state);
        let before = if game == 0 { 0 } else { self.cumulative[game - 1] };
        let nth = (state - before) as usize;
        let ply = self.games[game]
            .moves
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_pass())
            .nth(nth)
            .map(|(i, _)| i)?;
        Some((game, ply))
    }

    /// Draws one (game, ply) uniformly over all sampleable states.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Option<(usize, usize)> {
        let total = self.total_states();
        if total == 0 {
            return None;
        }
        self.locate(rng.gen_range(0..total))
    }

    /// `n` samples uniform over states, each under a uniform random symmetry.
    pub fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Sample>, CorpusError> {
        if self.total_states() == 0 {
            return Err(CorpusError::Empty);
        }
        (0..n)
            .map(|_| {
                let (g, ply) = self.draw(rng).expect("non-empty");
                let sym = Symmetry::ALL[rng.gen_range(0..8)];
                Ok(make_sample(&self.games[g], ply, sym).expect("corpus games replay"))
            })
            .collect()
    }
}

/// Training corpus plus one validation state per held-out game.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Corpus,
    pub validation: Vec<Sample>,
    pub holdout_games: usize,
    /// Original indices of the training games, in order.
    pub train_ids: Vec<usize>,
    /// Original indices of the held-out games, parallel to `validation`.
    pub validation_ids: Vec<usize>,
}

pub fn split(corpus: &Corpus, holdout_games: usize, seed: u64) -> Result<Split, CorpusError> {
    if holdout_games >= corpus.len().max(1) && holdout_games > 0 {
        return Err(CorpusError::HoldoutTooLarge {
            holdout: holdout_games,
            games: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut validation_ids = order[..holdout_games].to_vec();
    validation_ids.sort_unstable();
    let mut train_ids = order[holdout_games..].to_vec();
    train_ids.sort_unstable();
    let validation = validation_ids
        .iter()
        .map(|&g| {
            let game = &corpus.games[g];
            let plies: Vec<usize> = (0..game.moves.len()).filter(|&i| !game.moves[i].is_pass()).collect();
            let ply = plies[rng.gen_range(0..plies.len())];
            make_sample(game, ply, Symmetry::Identity).expect("corpus games replay")
        })
        .collect();
    let train = Corpus::new(corpus.size, train_ids.iter().map(|&g| corpus.games[g].clone()).collect())?;
    Ok(Split {
        train,
        validation,
        holdout_games,
        train_ids,
        validation_ids,
    })
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("refusing to write an empty corpus")]
    EmptyCorpus,
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported version {found} at offset {offset}")]
    BadVersion { offset: usize, found: u8 },
    #[error("unsupported board size {found} at offset {offset}")]
    BadSize { offset: usize, found: u8 },
    #[error("truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("bad result byte {found} at offset {offset}")]
    BadResult { offset: usize, found: u8 },
    #[error("move code {found} out of range at offset {offset}")]
    BadMove { offset: usize, found: u16 },
    #[error("{count} trailing bytes at offset {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("invalid corpus at offset {offset}: {source}")]
    Corpus { offset: usize, source: CorpusError },
}

/// Serializes a corpus in the version-1 little-endian cache layout.
pub fn encode_cache(corpus: &Corpus) -> Result<Vec<u8>, CacheError> {
    if corpus.is_empty() {
        return Err(CacheError::EmptyCorpus);
    }
    let n = corpus.size;
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    out.push(n as u8);
    out.extend_from_slice(&(corpus.games.len() as u32).to_le_bytes());
    for g in &corpus.games {
        out.push(g.result.code());
        out.extend_from_slice(&((g.komi * 2.0).round() as i16).to_le_bytes());
        out.extend_from_slice(&(g.moves.len() as u16).to_le_bytes());
        for m in &g.moves {
            out.extend_from_slice(&(m.code(n) as u16).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, needed: usize) -> Result<&'a [u8], CacheError> {
        if self.bytes.len() - self.offset < needed {
            return Err(CacheError::Truncated { offset: self.offset, needed });
        }
        let s = &self.bytes[self.offset..self.offset + needed];
        self.offset += needed;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CacheError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CacheError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

pub fn decode_cache(bytes: &[u8]) -> Result<Corpus, CacheError> {
    let mut cur = Cursor { bytes, offset: 0 };
    if cur.take(4).map_err(|_| CacheError::BadMagic)? != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = cur.u8()?;
    if version != CACHE_VERSION {
        return Err(CacheError::BadVersion { offset: 4, found: version });
    }
    let size_byte = cur.u8()?;
    let size = size_byte as usize;
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(CacheError::BadSize { offset: 5, found: size_byte });
    }
    let count = {
        let b = cur.take(4)?;
        u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
    };
    let mut games = Vec::with_capacity(count.min(1 << 20));
    let mut starts = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        starts.push(cur.offset);
        let at = cur.offset;
        let code = cur.u8()?;
        let result = Winner::from_code(code).ok_or(CacheError::BadResult { offset: at, found: code })?;
        let komi = {
            let b = cur.take(2)?;
            i16::from_le_bytes([b[0], b[1]]) as f32 / 2.0
        };
        let len = cur.u16()? as usize;
        let mut moves = Vec::with_capacity(len);
        for _ in 0..len {
            let at = cur.offset;
            let code = cur.u16()?;
            if code as usize > size * size {
                return Err(CacheError::BadMove { offset: at, found: code });
            }
            moves.push(Move::from_code(code as usize, size));
        }
        games.push(GameRecord { size, result, moves, komi });
    }
    if cur.offset != bytes.len() {
        return Err(CacheError::Trailing {
            offset: cur.offset,
            count: bytes.len() - cur.offset,
        });
    }
    Corpus::new(size, games).map_err(|source| {
        let offset = match source {
            CorpusError::NoStates(i) | CorpusError::SizeMismatch { index: i, .. } => starts[i],
            _ => 10,
        };
        CacheError::Corpus { offset, source }
    })
}

pub fn write_cache(corpus: &Corpus, path: &Path) -> Result<(), CacheError> {
    let bytes = encode_cache(corpus)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Corpus, CacheError> {
    decode_cache(&fs::read(path)?)
}

/// Outcome of ingesting a directory of SGF files.
#[derive(Debug)]
pub struct IngestReport {
    pub accepted: Vec<GameRecord>,
    pub rejected: Vec<(PathBuf, String)>,
}

impl IngestReport {
    /// Builds a corpus from accepted games of the most common board size;
    /// games of other sizes or without point moves are dropped.
    pub fn into_corpus(self) -> Result<Corpus, CorpusError> {
        let mut counts = [0usize; MAX_SIZE + 1];
        for g in &self.accepted {
            counts[g.size] += 1;
        }
        let size = (MIN_SIZE..=MAX_SIZE).max_by_key(|&s| (counts[s], s)).unwrap();
        let games: Vec<_> = self.accepted.into_iter().filter(|g| g.size == size && g.sampleable() > 0).collect();
        if games.is_empty() {
            return Err(CorpusError::Empty);
        }
        Corpus::new(size, games)
    }
}

/// Parses every `.sgf` file under `dir` (recursively, sorted by path).
pub fn ingest_dir(dir: &Path) -> io::Result<IngestReport> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("sgf")) {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut report = IngestReport {
        accepted: Vec::new(),
        rejected: Vec::new(),
    };
    for path in files {
        match parse_sgf_collection(&fs::read(&path)?) {
            Err(e) => report.rejected.push((path, e.reason().to_string())),
            Ok(games) => {
                for g in games {
                    match g {
                        Ok(g) => report.accepted.push(g),
                        Err(e) => report.rejected.push((path.clone(), e.reason().to_string())),
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Renders a record as a minimal SGF game.
pub fn to_sgf(record: &GameRecord) -> String {
    let n = record.size;
    let re = match record.result {
        Winner::Black => "B+",
        Winner::White => "W+",
    };
    let mut s = format!("(;FF[4]GM[1]SZ[{}]KM[{}]RE[{}]", n, record.komi, re);
    for (i, m) in record.moves.iter().enumerate() {
        let color = if i % 2 == 0 { 'B' } else { 'W' };
        match m.index(n) {
            None => s.push_str(&format!(";{}[]", color)),
            Some(p) => {
                let (r, c) = (p / n, p % n);
                s.push_str(&format!(";{}[{}{}]", color, (b'a' + c as u8) as char, (b'a' + r as u8) as char));
            }
        }
    }
    s.push(')');
    s
}
