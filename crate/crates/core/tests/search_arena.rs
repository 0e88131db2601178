use std::sync::Arc;
use std::time::Duration;

use mobilego::arena::{play_game, round_robin, sigma, GameConfig, Player};
use mobilego::goban::{Move, Position};
use mobilego::search::{puct_search, BatchedEvaluator, ConstantEvaluator, EvalError, EvalHandle, Evaluation, Evaluator, ScoreEvaluator, SearchConfig};

#[test]
fn score_stub_beats_uniform_stub() {
    let players = vec![
        Player::new("score", Arc::new(ScoreEvaluator { komi: 7.5 })),
        Player::new("uniform", Arc::new(ConstantEvaluator::uniform())),
    ];
    let cfg = GameConfig::new(5, SearchConfig::evaluations(100));
    let t = round_robin(&players, 50, &cfg, 17, 1).unwrap();
    assert_eq!(t.rows[0].name, "score");
    assert_eq!(t.rows[0].games, 50);
    assert!(t.rows[0].winrate > 0.8, "{:?}", t.rows);
    assert_eq!(t.rows[0].black_games, 25);
}

#[test]
fn identical_players_split_evenly() {
    let e: Arc<dyn Evaluator> = Arc::new(ScoreEvaluator { komi: 7.5 });
    let players = vec![Player::new("a", e.clone()), Player::new("b", e)];
    let cfg = GameConfig::new(5, SearchConfig::evaluations(16));
    let games = 200;
    let t = round_robin(&players, games, &cfg, 3, 1).unwrap();
    let a = t.rows.iter().find(|r| r.name == "a").unwrap();
    let bound = 3.0 * sigma(0.5, games);
    assert!((a.winrate - 0.5).abs() <= bound, "winrate {} bound {}", a.winrate, bound);
}

#[test]
fn nine_by_nine_game_with_tiny_budget_finishes() {
    let e = ConstantEvaluator::uniform();
    let g = play_game(&e, &e, &GameConfig::new(9, SearchConfig::evaluations(10)), 1, false).unwrap();
    assert!(!g.record.moves.is_empty());
    let end = g.record.replay().unwrap().pop().unwrap();
    assert!(end.is_over() || g.record.moves.len() == 3 * 81);
}

/// Uniform answers after a fixed delay per batch, so requests pile up.
struct Slow;

impl Evaluator for Slow {
    fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
        std::thread::sleep(Duration::from_millis(2));
        ConstantEvaluator::uniform().evaluate(positions)
    }
}

#[test]
fn sixty_four_games_fill_batches() {
    let be = BatchedEvaluator::new(Arc::new(Slow), 64);
    let threads: Vec<_> = (0..64)
        .map(|i| {
            let h: EvalHandle = be.handle();
            std::thread::spawn(move || {
                let mut p = Position::new(7).unwrap();
                for k in 0..3 {
                    let r = puct_search(&p, &h, &SearchConfig::evaluations(15)).unwrap();
                    let m = r.moves.iter().map(|m| m.mv).find(|m| !m.is_pass()).unwrap_or(Move::Pass);
                    p = p.play(if (i + k) % 5 == 0 { Move::Pass } else { m }).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert!(be.mean_batch_size() > 32.0, "mean batch {}", be.mean_batch_size());
}

#[test]
fn shutdown_cancels_waiting_requests() {
    struct Blocking;
    impl Evaluator for Blocking {
        fn evaluate(&self, positions: &[Position]) -> Result<Vec<Evaluation>, EvalError> {
            std::thread::sleep(Duration::from_millis(200));
            ConstantEvaluator::uniform().evaluate(positions)
        }
    }
    let be = Arc::new(BatchedEvaluator::new(Arc::new(Blocking), 1));
    let p = Position::new(5).unwrap();
    let mut waiting = Vec::new();
    for _ in 0..4 {
        let h = be.handle();
        let p = p.clone();
        waiting.push(std::thread::spawn(move || h.evaluate(&[p])));
    }
    std::thread::sleep(Duration::from_millis(50));
    be.shutdown();
    let results: Vec<_> = waiting.into_iter().map(|t| t.join().unwrap()).collect();
    assert!(results.iter().any(|r| r.is_ok()), "the batch in flight completes");
    assert!(results.contains(&Err(EvalError::Cancelled)), "queued requests are cancelled");
}
