//! Evaluation games between engines, round-robin tables with binomial
//! error bars, and inference throughput measurement.

use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::goban::{Color, GameRecord, Move, Position, Winner};
use crate::nn::Network;
use crate::search::{puct_search, select_move, Evaluator, SearchConfig};

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("a tournament needs at least two players, got {0}")]
    TooFewPlayers(usize),
    #[error("board size {0} is not playable")]
    BoardSize(usize),
    #[error("batch sizes must be positive")]
    ZeroBatch,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Standard error of a winrate `w` measured over `games` games.
pub fn sigma(w: f64, games: usize) -> f64 {
    if games == 0 {
        return 0.0;
    }
    (w * (1.0 - w) / games as f64).sqrt()
}

#[derive(Clone)]
pub struct Player {
    pub name: String,
    pub evaluator: Arc<dyn Evaluator>,
}

impl Player {
    pub fn new(name: impl Into<String>, evaluator: Arc<dyn Evaluator>) -> Player {
        Player { name: name.into(), evaluator }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GameConfig {
    pub size: usize,
    pub search: SearchConfig,
    /// Moves after which an unfinished game is scored as it stands.
    pub max_moves: usize,
}

impl GameConfig {
    pub fn new(size: usize, search: SearchConfig) -> GameConfig {
        GameConfig {
            size,
            search,
            max_moves: 3 * size * size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GameOutcome {
    pub winner: Winner,
    pub a_color: Color,
    pub record: GameRecord,
    /// Set when a search error forfeited the game.
    pub forfeit: Option<String>,
}

impl GameOutcome {
    pub fn a_won(&self) -> bool {
        matches!((self.winner, self.a_color), (Winner::Black, Color::Black) | (Winner::White, Color::White))
    }
}

fn color_winner(c: Color) -> Winner {
    match c {
        Color::Black => Winner::Black,
        Color::White => Winner::White,
    }
}

/// Plays one game; both sides search with `cfg.search` and pick moves with
/// the top-two randomization drawn from `seed`.
pub fn play_game(a: &dyn Evaluator, b: &dyn Evaluator, cfg: &GameConfig, seed: u64, a_black: bool) -> Result<GameOutcome, ArenaError> {
    let mut pos = Position::new(cfg.size).map_err(|_| ArenaError::BoardSize(cfg.size))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_color = if a_black { Color::Black } else { Color::White };
    let mut moves: Vec<Move> = Vec::new();
    let mut forfeit = None;
    while !pos.is_over() && moves.len() < cfg.max_moves {
        let side = pos.to_move();
        let engine = if side == a_color { a } else { b };
        let result = match puct_search(&pos, engine, &cfg.search) {
            Ok(r) => r,
            Err(e) => {
                forfeit = Some(format!("{:?} search failed at move {}: {}", side, moves.len(), e));
                break;
            }
        };
        let mv = select_move(&result, true, &mut rng);
        pos = pos.play(mv).expect("search returns legal moves");
        moves.push(mv);
    }
    let winner = match &forfeit {
        Some(_) => color_winner(pos.to_move().opposite()),
        None => Winner::from_score(pos.tromp_taylor_score(cfg.search.komi)),
    };
    Ok(GameOutcome {
        winner,
        a_color,
        record: GameRecord {
            size: cfg.size,
            result: winner,
            moves,
            komi: cfg.search.komi,
        },
        forfeit,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub games: usize,
    pub wins: usize,
    pub black_games: usize,
    pub white_games: usize,
    pub winrate: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct PlayedGame {
    pub black: usize,
    pub white: usize,
    pub outcome: GameOutcome,
}

#[derive(Clone, Debug)]
pub struct TournamentTable {
    /// Sorted by winrate, highest first; ties keep entry order.
    pub rows: Vec<TableRow>,
    pub games: Vec<PlayedGame>,
}

pub const TOURNAMENT_HEADER: &str = "name,games,winrate,sigma";

impl TournamentTable {
    pub fn total_games(&self) -> usize {
        self.games.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", TOURNAMENT_HEADER);
        for r in &self.rows {
            writeln!(s, "{},{},{:.3},{:.3}", r.name, r.games, r.winrate, r.sigma).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ArenaError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Every pair of players meets `games_per_pairing` times with colours
/// alternating; odd pairings start with the second-listed player on Black.
/// Games run on up to `workers` threads; results do not depend on the
/// worker count.
pub fn round_robin(players: &[Player], games_per_pairing: usize, cfg: &GameConfig, seed: u64, workers: usize) -> Result<TournamentTable, ArenaError> {
    if players.len() < 2 {
        return Err(ArenaError::TooFewPlayers(players.len()));
    }
    let mut schedule = Vec::new();
    let mut pairing = 0;
    for i in 0..players.len() {
        for j in i + 1..players.len() {
            for g in 0..games_per_pairing {
                schedule.push((i, j, (g + pairing) % 2 == 0));
            }
            pairing += 1;
        }
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = schedule.iter().map(|_| seeder.gen()).collect();
    let workers = workers.clamp(1, schedule.len().max(1));
    let mut outcomes: Vec<Option<Result<GameOutcome, ArenaError>>> = (0..schedule.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = outcomes.chunks_mut(schedule.len().div_ceil(workers).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let base = start;
            start += chunk.len();
            let schedule = &schedule;
            let seeds = &seeds;
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let (i, j, i_black) = schedule[base + k];
                    *slot = Some(play_game(&*players[i].evaluator, &*players[j].evaluator, cfg, seeds[base + k], i_black));
                }
            });
        }
    });
    let mut rows: Vec<TableRow> = players
        .iter()
        .map(|p| TableRow {
            name: p.name.clone(),
            games: 0,
            wins: 0,
            black_games: 0,
            white_games: 0,
            winrate: 0.0,
            sigma: 0.0,
        })
        .collect();
    let mut games = Vec::with_capacity(schedule.len());
    for (&(i, j, i_black), outcome) in schedule.iter().zip(outcomes) {
        let outcome = outcome.expect("every game slot is filled")?;
        let (black, white) = if i_black { (i, j) } else { (j, i) };
        rows[black].black_games += 1;
        rows[white].white_games += 1;
        rows[black].games += 1;
        rows[white].games += 1;
        match outcome.winner {
            Winner::Black => rows[black].wins += 1,
            Winner::White => rows[white].wins += 1,
        }
        games.push(PlayedGame { black, white, outcome });
    }
    for r in &mut rows {
        r.winrate = if r.games == 0 { 0.0 } else { r.wins as f64 / r.games as f64 };
        r.sigma = sigma(r.winrate, r.games);
    }
    rows.sort_by(|a, b| b.winrate.total_cmp(&a.winrate));
    Ok(TournamentTable { rows, games })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedRow {
    pub name: String,
    pub batch: usize,
    pub device: String,
    /// `None` when the batch did not fit the memory cap.
    pub states_per_sec: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SpeedReport {
    pub rows: Vec<SpeedRow>,
}

pub const SPEED_HEADER: &str = "name,batch,device,speed";

impl SpeedReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", SPEED_HEADER);
        for r in &self.rows {
            match r.states_per_sec {
                Some(v) => writeln!(s, "{},{},{},{:.2}", r.name, r.batch, r.device, v).unwrap(),
                None => writeln!(s, "{},{},{},failed", r.name, r.batch, r.device).unwrap(),
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ArenaError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub device: String,
    /// Minimum timed window per batch size and round, at least one forward.
    pub duration: Duration,
    /// Every round times each batch size once, in order; rows report the
    /// median rate over rounds. At least one round runs.
    pub rounds: usize,
    /// Batches whose inference would exceed this many bytes are failed rows.
    pub memory_cap: usize,
    pub seed: u64,
}

/// Default cap on inference working memory for the benchmark.
pub const DEFAULT_MEMORY_CAP: usize = 2 << 30;

/// Times inference-mode forwards on random binary inputs; input
/// construction is outside the timed region. Interleaving batch sizes
/// within a round spreads machine-load drift evenly over them.
pub fn throughput_bench(net: &Network, name: &str, cfg: &BenchConfig) -> Result<SpeedReport, ArenaError> {
    if cfg.batch_sizes.contains(&0) {
        return Err(ArenaError::ZeroBatch);
    }
    let per_state = net.spec().input_planes * net.spec().points();
    let fits = |b: usize| net.infer_peak_bytes(b) + 4 * per_state * b <= cfg.memory_cap;
    // Any prefix of a random binary buffer is a random binary batch.
    let largest = cfg.batch_sizes.iter().copied().filter(|&b| fits(b)).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input: Vec<f32> = (0..per_state * largest).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let forward = |b: usize| {
        std::hint::black_box(net.infer(&input[..per_state * b], b).expect("input sized from the architecture"));
    };
    let mut rates: Vec<Vec<f64>> = vec![Vec::new(); cfg.batch_sizes.len()];
    for round in 0..cfg.rounds.max(1) {
        for (k, &batch) in cfg.batch_sizes.iter().enumerate() {
            if !fits(batch) {
                continue;
            }
            if round == 0 {
                forward(batch);
            }
            let start = Instant::now();
            let mut states = 0usize;
            while states == 0 || start.elapsed() < cfg.duration {
                forward(batch);
                states += batch;
            }
            rates[k].push(states as f64 / start.elapsed().as_secs_f64());
        }
    }
    let rows = cfg
        .batch_sizes
        .iter()
        .zip(rates)
        .map(|(&batch, mut r)| {
            r.sort_by(f64::total_cmp);
            SpeedRow {
                name: name.to_string(),
                batch,
                device: cfg.device.clone(),
                states_per_sec: r.get(r.len() / 2).copied(),
            }
        })
        .collect();
    Ok(SpeedReport { rows })
}
