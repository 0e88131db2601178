//! Command-line front end. Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arena::{round_robin, throughput_bench, BenchConfig, GameConfig, Player, DEFAULT_MEMORY_CAP};
use crate::encoder::{make_sample, Sample, Symmetry, PLANES};
use crate::gtp::{serve, EngineSession};
use crate::netspec::{count_params, NetworkSpec, ValueLoss};
use crate::nn::Network;
use crate::records::{ingest_dir, read_cache, split, write_cache, Corpus};
use crate::search::{Budget, Evaluator, SearchConfig};
use crate::training::{evaluate, train_network, write_metrics_csv, Metrics, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "mobilego", version, about = "Go policy/value networks: data, training, search and play")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a directory of SGF files into a binary game cache.
    Ingest {
        #[arg(long)]
        sgf_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hold out games from a cache into separate train and holdout caches.
    Split {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        holdout: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<cache>.train`.
        #[arg(long)]
        train_out: Option<PathBuf>,
        /// Defaults to `<cache>.holdout`.
        #[arg(long)]
        holdout_out: Option<PathBuf>,
    },
    /// Train a network from a cache.
    Train(TrainArgs),
    /// Policy accuracy and value error of a checkpoint on every state of a cache.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cache: PathBuf,
    },
    /// Print the parameter count of a network name.
    CountParams {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 19)]
        board: usize,
    },
    /// Inference throughput per batch size.
    Bench(BenchArgs),
    /// Round-robin tournament between checkpoints.
    Tournament(TournamentArgs),
    /// Serve the Go Text Protocol on standard input and output.
    Gtp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        movetime: u64,
        /// Use the top-two move randomization.
        #[arg(long)]
        randomize: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the input planes of one training state.
    EncodeDump {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        game: usize,
        #[arg(long)]
        ply: usize,
        #[arg(long, default_value_t = 0)]
        symmetry: u8,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Mse,
    Bce,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    spec: String,
    /// Overrides the loss implied by the name.
    #[arg(long, value_enum)]
    value_loss: Option<LossArg>,
    /// Overrides the weight implied by the name.
    #[arg(long)]
    value_weight: Option<f64>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1_000_000)]
    epoch_samples: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Learning-rate schedule as `epoch:lr` pairs.
    #[arg(long, default_value = "0:0.005,100:0.0005,150:0.00005")]
    lr: String,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0001)]
    l2: f64,
    /// Games held out for per-epoch validation.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also keep a checkpoint per epoch here.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, conflicts_with = "spec")]
    ckpt: Option<PathBuf>,
    /// Benchmark freshly initialized weights instead of a checkpoint.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, default_value_t = 19)]
    board: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512,1024,2048,4096,8192,16384,32768,65536")]
    batches: Vec<usize>,
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Timed window per batch size and round.
    #[arg(long, default_value_t = 1000)]
    duration_ms: u64,
    /// Interleaved rounds; each row reports the median.
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = DEFAULT_MEMORY_CAP >> 20)]
    memory_cap_mb: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TournamentArgs {
    #[arg(long, value_delimiter = ',')]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    games: usize,
    #[arg(long, default_value_t = 1000)]
    movetime: u64,
    /// Fixed evaluations per move instead of a time limit.
    #[arg(long)]
    evaluations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn parse_spec(name: &str, board: usize) -> Result<NetworkSpec, CliError> {
    let spec = NetworkSpec::parse(name).map_err(|e| usage(e.to_string()))?.with_board(board);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>, CliError> {
    text.split(',')
        .map(|pair| {
            let (e, lr) = pair.split_once(':').ok_or_else(|| usage(format!("bad schedule entry {:?}", pair)))?;
            Ok((
                e.trim().parse().map_err(|_| usage(format!("bad epoch {:?}", e)))?,
                lr.trim().parse().map_err(|_| usage(format!("bad learning rate {:?}", lr)))?,
            ))
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Network, CliError> {
    require_file(path)?;
    Network::load(path).map_err(runtime)
}

fn load_cache(path: &Path) -> Result<Corpus, CliError> {
    require_file(path)?;
    read_cache(path).map_err(runtime)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 2;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e);
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let io_err = |e: io::Error| runtime(e);
    match command {
        Command::Ingest { sgf_dir, out: path } => {
            if !sgf_dir.is_dir() {
                return Err(usage(format!("no such directory: {}", sgf_dir.display())));
            }
            writeln!(err, "config: command=ingest sgf_dir={} out={}", sgf_dir.display(), path.display()).map_err(io_err)?;
            let report = ingest_dir(&sgf_dir).map_err(runtime)?;
            let accepted = report.accepted.len();
            for (file, reason) in &report.rejected {
                writeln!(err, "rejected {}: {}", file.display(), reason).map_err(io_err)?;
            }
            let rejected = report.rejected.len();
            let corpus = report.into_corpus().map_err(runtime)?;
            write_cache(&corpus, &path).map_err(runtime)?;
            writeln!(
                out,
                "accepted {} rejected {} kept {} games of size {} ({} states)",
                accepted,
                rejected,
                corpus.len(),
                corpus.size(),
                corpus.total_states()
            )
            .map_err(io_err)?;
        }
        Command::Split {
            cache,
            holdout,
            seed,
            train_out,
            holdout_out,
        } => {
            let corpus = load_cache(&cache)?;
            let train_out = train_out.unwrap_or_else(|| cache.with_extension("train"));
            let holdout_out = holdout_out.unwrap_or_else(|| cache.with_extension("holdout"));
            writeln!(
                err,
                "config: command=split cache={} holdout={} seed={} train_out={} holdout_out={}",
                cache.display(),
                holdout,
                seed,
                train_out.display(),
                holdout_out.display()
            )
            .map_err(io_err)?;
            let s = split(&corpus, holdout, seed).map_err(|e| usage(e.to_string()))?;
            write_cache(&s.train, &train_out).map_err(runtime)?;
            if holdout > 0 {
                let held = Corpus::new(corpus.size(), s.validation_ids.iter().map(|&g| corpus.games()[g].clone()).collect()).map_err(runtime)?;
                write_cache(&held, &holdout_out).map_err(runtime)?;
            }
            writeln!(out, "train {} games, holdout {} games", s.train.len(), s.holdout_games).map_err(io_err)?;
        }
        Command::Train(a) => train_command(a, out, err)?,
        Command::Eval { ckpt, cache } => {
            let net = load_checkpoint(&ckpt)?;
            let corpus = load_cache(&cache)?;
            if corpus.size() != net.spec().board {
                return Err(usage(format!(
                    "cache board {} does not match network board {}",
                    corpus.size(),
                    net.spec().board
                )));
            }
            writeln!(
                err,
                "config: command=eval ckpt={} cache={} spec={}",
                ckpt.display(),
                cache.display(),
                net.spec()
            )
            .map_err(io_err)?;
            let m = evaluate_corpus(&net, &corpus)?;
            writeln!(
                out,
                "states {} policy_accuracy {:.4} value_mse {:.4} policy_loss {:.4}",
                corpus.total_states(),
                m.policy_accuracy,
                m.value_mse,
                m.policy_loss
            )
            .map_err(io_err)?;
        }
        Command::CountParams { spec, board } => {
            let spec = parse_spec(&spec, board)?;
            writeln!(err, "config: command=count-params spec={} board={}", spec, board).map_err(io_err)?;
            writeln!(out, "{}", count_params(&spec)).map_err(io_err)?;
        }
        Command::Bench(a) => bench_command(a, out, err)?,
        Command::Tournament(a) => tournament_command(a, out, err)?,
        Command::Gtp {
            ckpt,
            movetime,
            randomize,
            seed,
        } => {
            if movetime == 0 {
                return Err(usage("movetime must be positive"));
            }
            let net = load_checkpoint(&ckpt)?;
            writeln!(
                err,
                "config: command=gtp ckpt={} spec={} movetime={}ms randomize={} seed={}",
                ckpt.display(),
                net.spec(),
                movetime,
                randomize,
                seed
            )
            .map_err(io_err)?;
            let board = net.spec().board;
            let mut session = EngineSession::new(Arc::new(net), board)
                .map_err(runtime)?
                .with_budget(Budget::Time(Duration::from_millis(movetime)))
                .with_randomize(randomize, seed);
            serve(&mut session, io::stdin().lock(), out).map_err(io_err)?;
        }
        Command::EncodeDump { cache, game, ply, symmetry } => {
            let corpus = load_cache(&cache)?;
            let sym = Symmetry::from_id(symmetry).map_err(|e| usage(e.to_string()))?;
            let record = corpus
                .games()
                .get(game)
                .ok_or_else(|| usage(format!("game {} out of range (cache has {})", game, corpus.len())))?;
            writeln!(
                err,
                "config: command=encode-dump cache={} game={} ply={} symmetry={}",
                cache.display(),
                game,
                ply,
                symmetry
            )
            .map_err(io_err)?;
            let sample = make_sample(record, ply, sym).map_err(|e| usage(e.to_string()))?;
            dump_sample(&sample, out).map_err(io_err)?;
        }
    }
    Ok(())
}

fn dump_sample(sample: &Sample, out: &mut dyn Write) -> io::Result<()> {
    let n = sample.input.size();
    for k in 0..PLANES {
        writeln!(out, "plane {}", k)?;
        let plane = sample.input.plane(k);
        for r in 0..n {
            let row: String = plane[r * n..(r + 1) * n].iter().map(|&v| if v != 0 { '1' } else { '.' }).collect();
            writeln!(out, "{}", row)?;
        }
    }
    writeln!(out, "policy_target {} value_target {}", sample.policy_target, sample.value_target)
}

/// Metrics over every sampleable state, encoded in chunks to bound memory.
fn evaluate_corpus(net: &Network, corpus: &Corpus) -> Result<Metrics, CliError> {
    const CHUNK: usize = 4096;
    let mut total = Metrics::default();
    let mut count = 0usize;
    let mut chunk = Vec::with_capacity(CHUNK);
    let flush = |chunk: &mut Vec<Sample>, total: &mut Metrics, count: &mut usize| -> Result<(), CliError> {
        if chunk.is_empty() {
            return Ok(());
        }
        let m = evaluate(net, chunk).map_err(runtime)?;
        let w = chunk.len() as f64;
        total.policy_accuracy += m.policy_accuracy * w;
        total.value_mse += m.value_mse * w;
        total.policy_loss += m.policy_loss * w;
        total.value_loss += m.value_loss * w;
        total.l2_loss = m.l2_loss;
        *count += chunk.len();
        chunk.clear();
        Ok(())
    };
    for g in corpus.games() {
        for (ply, m) in g.moves.iter().enumerate() {
            if m.is_pass() {
                continue;
            }
            chunk.push(make_sample(g, ply, Symmetry::Identity).map_err(runtime)?);
            if chunk.len() == CHUNK {
                flush(&mut chunk, &mut total, &mut count)?;
            }
        }
    }
    flush(&mut chunk, &mut total, &mut count)?;
    let w = count.max(1) as f64;
    total.policy_accuracy /= w;
    total.value_mse /= w;
    total.policy_loss /= w;
    total.value_loss /= w;
    Ok(total)
}

fn train_command(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let corpus = load_cache(&a.cache)?;
    let spec = parse_spec(&a.spec, corpus.size())?;
    let mut cfg = TrainConfig::for_spec(&spec);
    if let Some(l) = a.value_loss {
        cfg.value_loss = match l {
            LossArg::Mse => ValueLoss::Mse,
            LossArg::Bce => ValueLoss::Bce,
        };
    }
    if let Some(w) = a.value_weight {
        cfg.value_weight = w;
    }
    cfg.batch_size = a.batch;
    cfg.epoch_samples = a.epoch_samples;
    cfg.total_epochs = a.epochs;
    cfg.schedule = parse_schedule(&a.lr)?;
    cfg.momentum = a.momentum;
    cfg.l2_weight = a.l2;
    cfg.seed = a.seed;
    cfg.checkpoint_dir = a.checkpoint_dir.clone();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    writeln!(
        err,
        "config: command=train cache={} spec={} board={} params={} value_loss={:?} value_weight={} batch={} epoch_samples={} epochs={} lr={} momentum={} l2={} holdout={} seed={} out={}",
        a.cache.display(),
        spec,
        spec.board,
        count_params(&spec),
        cfg.value_loss,
        cfg.value_weight,
        cfg.batch_size,
        cfg.epoch_samples,
        cfg.total_epochs,
        a.lr,
        cfg.momentum,
        cfg.l2_weight,
        a.holdout,
        cfg.seed,
        a.out.display()
    )
    .map_err(runtime)?;
    let s = split(&corpus, a.holdout, a.seed).map_err(|e| usage(e.to_string()))?;
    let net = Network::new(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(runtime)?;
    let mut source = s.train;
    let (net, log) = train_network(net, &mut source, &s.validation, &cfg).map_err(runtime)?;
    net.save(&a.out).map_err(runtime)?;
    if let Some(path) = &a.log {
        let f = std::fs::File::create(path).map_err(runtime)?;
        write_metrics_csv(&log, io::BufWriter::new(f)).map_err(runtime)?;
    }
    match log.last() {
        Some(l) => writeln!(
            out,
            "trained {} epochs; last policy_loss {:.4} val_accuracy {:.4}",
            log.len(),
            l.metrics.policy_loss,
            l.metrics.policy_accuracy
        ),
        None => writeln!(out, "wrote initial checkpoint {}", a.out.display()),
    }
    .map_err(runtime)?;
    Ok(())
}

fn bench_command(a: BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let net = match (&a.ckpt, &a.spec) {
        (Some(p), None) => load_checkpoint(p)?,
        (None, Some(s)) => Network::new(&parse_spec(s, a.board)?, &mut ChaCha8Rng::seed_from_u64(0)).map_err(runtime)?,
        _ => return Err(usage("bench needs --ckpt or --spec")),
    };
    if a.batches.is_empty() || a.batches.contains(&0) {
        return Err(usage("batch sizes must be positive"));
    }
    let cfg = BenchConfig {
        batch_sizes: a.batches.clone(),
        device: a.device.clone(),
        duration: Duration::from_millis(a.duration_ms.max(1)),
        rounds: a.rounds,
        memory_cap: a.memory_cap_mb << 20,
        seed: 0,
    };
    writeln!(
        err,
        "config: command=bench spec={} board={} batches={:?} device={} duration={}ms rounds={} memory_cap={}MiB",
        net.spec(),
        net.spec().board,
        a.batches,
        a.device,
        a.duration_ms,
        a.rounds,
        a.memory_cap_mb
    )
    .map_err(runtime)?;
    let name = net.spec().to_string();
    let report = throughput_bench(&net, &name, &cfg).map_err(runtime)?;
    if let Some(p) = &a.out {
        report.write_csv(p).map_err(runtime)?;
    }
    write!(out, "{}", report.to_csv()).map_err(runtime)?;
    Ok(())
}

fn tournament_command(a: TournamentArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    if a.ckpts.len() < 2 {
        return Err(usage(format!("a tournament needs at least two checkpoints, got {}", a.ckpts.len())));
    }
    if a.games == 0 || a.movetime == 0 || a.evaluations == Some(0) {
        return Err(usage("games, movetime and evaluations must be positive"));
    }
    let mut players = Vec::new();
    let mut board = None;
    for p in &a.ckpts {
        let net = load_checkpoint(p)?;
        if *board.get_or_insert(net.spec().board) != net.spec().board {
            return Err(usage("all checkpoints must share a board size"));
        }
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| net.spec().to_string());
        players.push(Player::new(name, Arc::new(net) as Arc<dyn Evaluator>));
    }
    let budget = match a.evaluations {
        Some(n) => Budget::Evaluations(n),
        None => Budget::Time(Duration::from_millis(a.movetime)),
    };
    let cfg = GameConfig::new(
        board.expect("at least two checkpoints"),
        SearchConfig {
            budget,
            ..SearchConfig::default()
        },
    );
    writeln!(
        err,
        "config: command=tournament players={} games_per_pairing={} budget={:?} seed={} workers={}",
        players.len(),
        a.games,
        budget,
        a.seed,
        a.workers
    )
    .map_err(runtime)?;
    let table = round_robin(&players, a.games, &cfg, a.seed, a.workers).map_err(runtime)?;
    for g in table.games.iter().filter(|g| g.outcome.forfeit.is_some()) {
        writeln!(err, "forfeit: {}", g.outcome.forfeit.as_deref().unwrap_or_default()).map_err(runtime)?;
    }
    if let Some(p) = &a.out {
        table.write_csv(p).map_err(runtime)?;
    }
    write!(out, "{}", table.to_csv()).map_err(runtime)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("mobilego").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn count_params_prints_number() {
        let (code, out, err) = run_str(&["count-params", "--spec", "mobile.conv.avg.bin.33.200.64"]);
        assert_eq!(code, 0, "{}", err);
        assert_eq!(out, "970477\n");
        assert!(err.starts_with("config: command=count-params spec=mobile.conv.avg.bin.33.64.200"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_str(&["count-params", "--spec", "bogus.1"]).0, 2);
        assert_eq!(run_str(&["frobnicate"]).0, 2);
        assert_eq!(run_str(&["eval", "--ckpt", "/nonexistent", "--cache", "/nonexistent"]).0, 2);
        assert_eq!(run_str(&["tournament", "--ckpts", "a.mgnn", "--games", "2"]).0, 2);
        assert_eq!(run_str(&["count-params", "--spec", "a0.2.8", "--bogus"]).0, 2);
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!(parse_schedule("0:0.5,10:0.05").unwrap(), vec![(0, 0.5), (10, 0.05)]);
        assert!(parse_schedule("0-0.5").is_err());
    }
}
