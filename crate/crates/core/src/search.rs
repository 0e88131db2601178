//! PUCT tree search over network evaluations, the top-two move
//! randomization rule, and a cross-thread batching evaluator.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::encoder::encode;
use crate::goban::{Color, Move, Position, DEFAULT_KOMI};
use crate::nn::Network;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// One entry per board point, row-major.
    pub policy: Vec<f32>,
    /// Probability that White wins.
    pub value: f32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("evaluator shut down with the request pending")]
    Cancelled,
    #[error("evaluation failed: {0}")]
    Failed(String),
}

/// White's win probability of a finished game under area scoring.
pub fn terminal_value(position: &Position, komi: f32) -> f32 {
    if position.tromp_taylor_score(komi) > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError>;

    /// Value of a position where the game has ended.
    fn terminal(&self, position: &Position, komi: f32) -> f32 {
        terminal_value(position, komi)
    }

    /// Whether positions on a `size` board can be evaluated.
    fn supports_size(&self, _size: usize) -> bool {
        true
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
        (**self).evaluate(positions)
    }

    fn terminal(&self, position: &Position, komi: f32) -> f32 {
        (**self).terminal(position, komi)
    }

    fn supports_size(&self, size: usize) -> bool {
        (**self).supports_size(size)
    }
}

impl Evaluator for Network {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let tensors: Vec<_> = positions.iter().map(encode).collect();
        let refs: Vec<_> = tensors.iter().collect();
        let out = self.infer_tensors(&refs).map_err(|e| EvalError::Failed(e.to_string()))?;
        let s = out.policy.len() / positions.len();
        Ok((0..positions.len())
            .map(|i| Evaluation {
                policy: out.policy[i * s..(i + 1) * s].to_vec(),
                value: out.value[i],
            })
            .collect())
    }

    fn supports_size(&self, size: usize) -> bool {
        size == self.spec().board
    }
}

/// Uniform policy and a fixed value, for tests and baselines.
#[derive(Clone, Copy, Debug)]
pub struct ConstantEvaluator {
    pub value: f32,
    /// When set, finished games also score `value` instead of their result.
    pub constant_terminal: bool,
}

impl ConstantEvaluator {
    pub fn uniform() -> ConstantEvaluator {
        ConstantEvaluator {
            value: 0.5,
            constant_terminal: false,
        }
    }
}

impl Evaluator for ConstantEvaluator {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
        Ok(positions
            .iter()
            .map(|p| {
                let n = p.size() * p.size();
                Evaluation {
                    policy: vec![1.0 / n as f32; n],
                    value: self.value,
                }
            })
            .collect())
    }

    fn terminal(&self, position: &Position, komi: f32) -> f32 {
        if self.constant_terminal {
            self.value
        } else {
            terminal_value(position, komi)
        }
    }
}

/// Uniform policy; value is the current area-score winner (1 if White leads).
#[derive(Clone, Copy, Debug)]
pub struct ScoreEvaluator {
    pub komi: f32,
}

impl Evaluator for ScoreEvaluator {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
        Ok(positions
            .iter()
            .map(|p| {
                let n = p.size() * p.size();
                Evaluation {
                    policy: vec![1.0 / n as f32; n],
                    value: terminal_value(p, self.komi),
                }
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    /// Exact number of evaluations, counting the root.
    Evaluations(usize),
    /// Wall-clock limit checked before each simulation.
    Time(Duration),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub c_puct: f64,
    /// Q assigned to unvisited children.
    pub unvisited_q: f64,
    pub budget: Budget,
    pub komi: f32,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            c_puct: 1.25,
            unvisited_q: 0.0,
            budget: Budget::Time(Duration::from_secs(1)),
            komi: DEFAULT_KOMI,
        }
    }
}

impl SearchConfig {
    pub fn evaluations(n: usize) -> SearchConfig {
        SearchConfig {
            budget: Budget::Evaluations(n),
            ..SearchConfig::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SearchError {
    #[error("the game is already over")]
    Terminal,
    #[error("search budget must be positive")]
    ZeroBudget,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub mv: Move,
    pub prior: f32,
    pub visits: u32,
    /// Sum of values from the perspective of the player moving at the parent.
    pub total: f64,
    pub child: Option<usize>,
}

impl Edge {
    pub fn q(&self) -> Option<f64> {
        (self.visits > 0).then(|| self.total / self.visits as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub position: Position,
    pub visits: u32,
    pub terminal: bool,
    pub edges: Vec<Edge>,
}

/// Arena of nodes; index 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    pub nodes: Vec<Node>,
    pub evaluations: usize,
    /// Sum of root-mover values over all simulations, root evaluation included.
    pub root_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedMove {
    pub mv: Move,
    pub visits: u32,
    pub prior: f32,
    pub q: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Sorted by visits, then prior, both descending, then move code.
    pub moves: Vec<RankedMove>,
    /// Root mover's expected win probability.
    pub root_value: f64,
    pub evaluations: usize,
}

fn mover_value(white_value: f32, to_move: Color) -> f64 {
    match to_move {
        Color::White => white_value as f64,
        Color::Black => 1.0 - white_value as f64,
    }
}

/// Legal moves with network priors renormalized; pass takes the smallest
/// legal point prior.
fn expand_edges(position: &Position, eval: &Evaluation) -> Vec<Edge> {
    let n = position.size();
    let legal = position.legal_moves();
    let mut raw: Vec<f32> = legal
        .iter()
        .map(|m| match m.index(n) {
            Some(i) => eval.policy[i].max(0.0),
            None => f32::NAN,
        })
        .collect();
    let min = raw.iter().filter(|p| !p.is_nan()).fold(f32::INFINITY, |a, &p| a.min(p));
    let pass_prior = if min.is_finite() { min } else { 1.0 };
    raw.iter_mut().filter(|p| p.is_nan()).for_each(|p| *p = pass_prior);
    let sum: f32 = raw.iter().sum();
    let k = raw.len() as f32;
    legal
        .into_iter()
        .zip(raw)
        .map(|(mv, p)| Edge {
            mv,
            prior: if sum > 0.0 { p / sum } else { 1.0 / k },
            visits: 0,
            total: 0.0,
            child: None,
        })
        .collect()
}

impl SearchTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Checks N(node) = 1 + sum of child edge visits at every expanded node.
    pub fn check_conservation(&self) -> Result<(), String> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.terminal {
                continue;
            }
            let sum: u32 = node.edges.iter().map(|e| e.visits).sum();
            if node.visits != 1 + sum {
                return Err(format!("node {}: {} visits, children {}", i, node.visits, sum));
            }
            for e in &node.edges {
                if let Some(c) = e.child {
                    if self.nodes[c].visits != e.visits {
                        return Err(format!("node {} edge {:?}: edge {} vs child {}", i, e.mv, e.visits, self.nodes[c].visits));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn result(&self) -> SearchResult {
        let n = self.nodes[0].position.size();
        let mut moves: Vec<RankedMove> = self.nodes[0]
            .edges
            .iter()
            .map(|e| RankedMove {
                mv: e.mv,
                visits: e.visits,
                prior: e.prior,
                q: e.q(),
            })
            .collect();
        moves.sort_by(|a, b| b.visits.cmp(&a.visits).then(b.prior.total_cmp(&a.prior)).then(a.mv.code(n).cmp(&b.mv.code(n))));
        SearchResult {
            moves,
            root_value: self.root_total / self.nodes[0].visits.max(1) as f64,
            evaluations: self.evaluations,
        }
    }

    fn select(&self, node: usize, cfg: &SearchConfig) -> usize {
        let nd = &self.nodes[node];
        let sqrt_n = (nd.visits as f64).sqrt();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, e) in nd.edges.iter().enumerate() {
            let q = e.q().unwrap_or(cfg.unvisited_q);
            let u = cfg.c_puct * e.prior as f64 * sqrt_n / (1.0 + e.visits as f64);
            if q + u > best_score {
                best_score = q + u;
                best = i;
            }
        }
        best
    }

    /// One simulation: descend, evaluate or score the leaf, back up.
    fn simulate(&mut self, eval: &dyn Evaluator, cfg: &SearchConfig) -> Result<(), SearchError> {
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut node = 0;
        let leaf_white_value = loop {
            let e = self.select(node, cfg);
            path.push((node, e));
            match self.nodes[node].edges[e].child {
                Some(c) if self.nodes[c].terminal => break eval.terminal(&self.nodes[c].position, cfg.komi),
                Some(c) => node = c,
                None => {
                    let mv = self.nodes[node].edges[e].mv;
                    let position = self.nodes[node].position.play(mv).expect("edges hold legal moves");
                    let (terminal, value, edges) = if position.is_over() {
                        (true, eval.terminal(&position, cfg.komi), Vec::new())
                    } else {
                        let ev = eval
                            .evaluate(std::slice::from_ref(&position))?
                            .pop()
                            .ok_or(EvalError::Failed("empty reply".into()))?;
                        let edges = expand_edges(&position, &ev);
                        (false, ev.value, edges)
                    };
                    self.nodes.push(Node {
                        position,
                        visits: 0,
                        terminal,
                        edges,
                    });
                    let c = self.nodes.len() - 1;
                    self.nodes[node].edges[e].child = Some(c);
                    break value;
                }
            }
        };
        self.evaluations += 1;
        let root_mover = self.nodes[0].position.to_move();
        self.root_total += mover_value(leaf_white_value, root_mover);
        for &(nd, e) in &path {
            let mover = self.nodes[nd].position.to_move();
            self.nodes[nd].visits += 1;
            let edge = &mut self.nodes[nd].edges[e];
            edge.visits += 1;
            edge.total += mover_value(leaf_white_value, mover);
            if let Some(c) = edge.child {
                if self.nodes[c].terminal {
                    self.nodes[c].visits += 1;
                }
            }
        }
        // Non-terminal leaves count their own first visit.
        let (last, e) = *path.last().unwrap();
        if let Some(c) = self.nodes[last].edges[e].child {
            if !self.nodes[c].terminal {
                self.nodes[c].visits += 1;
            }
        }
        Ok(())
    }
}

/// Runs PUCT from `position` and returns the whole tree.
pub fn search_tree(position: &Position, eval: &dyn Evaluator, cfg: &SearchConfig) -> Result<SearchTree, SearchError> {
    if position.is_over() {
        return Err(SearchError::Terminal);
    }
    match cfg.budget {
        Budget::Evaluations(0) => return Err(SearchError::ZeroBudget),
        Budget::Time(d) if d.is_zero() => return Err(SearchError::ZeroBudget),
        _ => {}
    }
    let start = Instant::now();
    let ev = eval
        .evaluate(std::slice::from_ref(position))?
        .pop()
        .ok_or(EvalError::Failed("empty reply".into()))?;
    let mut tree = SearchTree {
        nodes: vec![Node {
            position: position.clone(),
            visits: 1,
            terminal: false,
            edges: expand_edges(position, &ev),
        }],
        evaluations: 1,
        root_total: mover_value(ev.value, position.to_move()),
    };
    loop {
        let more = match cfg.budget {
            Budget::Evaluations(n) => tree.evaluations < n,
            Budget::Time(d) => start.elapsed() < d,
        };
        if !more {
            break;
        }
        tree.simulate(eval, cfg)?;
    }
    Ok(tree)
}

pub fn puct_search(position: &Position, eval: &dyn Evaluator, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    search_tree(position, eval, cfg).map(|t| t.result())
}

/// Most-visited move; with `randomize`, the runner-up is played half the
/// time when it has more than half the leader's visits.
pub fn select_move<R: Rng>(result: &SearchResult, randomize: bool, rng: &mut R) -> Move {
    let best = &result.moves[0];
    if randomize {
        if let Some(second) = result.moves.get(1) {
            if 2 * second.visits > best.visits && rng.gen_bool(0.5) {
                return second.mv;
            }
        }
    }
    best.mv
}

struct Request {
    positions: Vec<Position>,
    reply: Sender<Result<Vec<Evaluation>, EvalError>>,
}

enum Message {
    Eval(Request),
    Shutdown,
}

#[derive(Default)]
struct BatchStats {
    batches: AtomicU64,
    states: AtomicU64,
    stop: AtomicBool,
}

/// Worker thread that merges concurrent requests into batched evaluations.
pub struct BatchedEvaluator {
    sender: Mutex<Option<Sender<Message>>>,
    stats: Arc<BatchStats>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

/// Cloneable client side of a [`BatchedEvaluator`]; one per game.
#[derive(Clone)]
pub struct EvalHandle {
    sender: Sender<Message>,
}

impl BatchedEvaluator {
    /// Requests are answered as soon as the worker is free; a batch holds
    /// whatever arrived meanwhile, capped at `max_batch` states.
    pub fn new(inner: Arc<dyn Evaluator>, max_batch: usize) -> BatchedEvaluator {
        assert!(max_batch >= 1, "max_batch must be positive");
        let (tx, rx) = mpsc::channel();
        let stats = Arc::new(BatchStats::default());
        let st = stats.clone();
        let worker = std::thread::spawn(move || batch_worker(inner, rx, max_batch, st));
        BatchedEvaluator {
            sender: Mutex::new(Some(tx)),
            stats,
            worker: Mutex::new(Some(worker)),
        }
    }

    pub fn handle(&self) -> EvalHandle {
        EvalHandle {
            sender: self.sender.lock().unwrap().as_ref().expect("evaluator is running").clone(),
        }
    }

    pub fn mean_batch_size(&self) -> f64 {
        let b = self.stats.batches.load(Ordering::Relaxed);
        if b == 0 {
            0.0
        } else {
            self.stats.states.load(Ordering::Relaxed) as f64 / b as f64
        }
    }

    pub fn batches(&self) -> u64 {
        self.stats.batches.load(Ordering::Relaxed)
    }

    /// Stops the worker after the batch in flight; requests still queued
    /// are answered with `Cancelled`.
    pub fn shutdown(&self) {
        self.stats.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.sender.lock().unwrap().take() {
            let _ = tx.send(Message::Shutdown);
        }
        if let Some(w) = self.worker.lock().unwrap().take() {
            let _ = w.join();
        }
    }
}

impl Drop for BatchedEvaluator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn batch_worker(inner: Arc<dyn Evaluator>, rx: Receiver<Message>, max_batch: usize, stats: Arc<BatchStats>) {
    let mut stopping = false;
    while !stopping {
        let first = match rx.recv() {
            Ok(Message::Eval(r)) if stats.stop.load(Ordering::SeqCst) => {
                let _ = r.reply.send(Err(EvalError::Cancelled));
                break;
            }
            Ok(Message::Eval(r)) => r,
            Ok(Message::Shutdown) | Err(_) => break,
        };
        let mut pending = first.positions.len();
        let mut batch = vec![first];
        while pending < max_batch {
            match rx.try_recv() {
                Ok(Message::Eval(r)) => {
                    pending += r.positions.len();
                    batch.push(r);
                }
                Ok(Message::Shutdown) => {
                    stopping = true;
                    break;
                }
                Err(_) => break,
            }
        }
        let positions: Vec<Position> = batch.iter().flat_map(|r| r.positions.iter().cloned()).collect();
        stats.batches.fetch_add(1, Ordering::Relaxed);
        stats.states.fetch_add(positions.len() as u64, Ordering::Relaxed);
        match inner.evaluate(&positions) {
            Ok(mut results) => {
                for r in batch.into_iter().rev() {
                    let tail = results.split_off(results.len() - r.positions.len());
                    let _ = r.reply.send(Ok(tail));
                }
            }
            Err(e) => {
                for r in batch {
                    let _ = r.reply.send(Err(e.clone()));
                }
            }
        }
    }
    // Anything queued after shutdown is cancelled.
    while let Ok(m) = rx.try_recv() {
        if let Message::Eval(r) = m {
            let _ = r.reply.send(Err(EvalError::Cancelled));
        }
    }
}

impl Evaluator for EvalHandle {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
        let (tx, rx) = mpsc::channel();
        self.sender
            .send(Message::Eval(Request {
                positions: positions.to_vec(),
                reply: tx,
            }))
            .map_err(|_| EvalError::Cancelled)?;
        rx.recv().map_err(|_| EvalError::Cancelled)?
    }
}
